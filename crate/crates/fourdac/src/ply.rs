//! PLY reading and writing.
//!
//! Two kinds of files flow through the codec. Input clouds are ordinary PLY
//! (ascii or binary little-endian) with float `x y z` and uchar
//! `red green blue`. Decoded frames are written by [`write_ply`] with float
//! positions and *double* colors holding the unclamped linear RGB image of
//! the reconstructed attributes, plus `comment depth`/`comment frame_index`
//! lines; [`read_ply_frame`] inverts that exactly, so evaluation sees the
//! reconstruction at full precision instead of through an 8-bit quantizer.

use crate::color::{rgb_real_to_yuv, yuv_real_to_rgb};
use crate::error::{Error, Result};
use crate::frame::{PointFrame, RawPointCloud};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
    fn parse(word: &str) -> Result<PropType> {
        Ok(match word {
            "char" | "int8" => PropType::I8,
            "uchar" | "uint8" => PropType::U8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            other => {
                return Err(Error::ParseError(format!("unknown property type {other}")));
            }
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::I8 | PropType::U8 => 1,
            PropType::I16 | PropType::U16 => 2,
            PropType::I32 | PropType::U32 | PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read_binary(self, bytes: &[u8]) -> f64 {
        match self {
            PropType::I8 => bytes[0] as i8 as f64,
            PropType::U8 => bytes[0] as f64,
            PropType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PropType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            PropType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

struct PlyVertices {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    color_is_float: bool,
    comments: Vec<String>,
}

fn parse_ply(bytes: &[u8]) -> Result<PlyVertices> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::ParseError("header is not UTF-8".into()))?;
    let body = &bytes[header_end..];

    let mut lines = header.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(Error::ParseError("missing ply signature".into()));
    }

    let mut format = None;
    let mut comments = Vec::new();
    let mut vertex_count: Option<usize> = None;
    // (type, name) per vertex property, in file order.
    let mut props: Vec<(PropType, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    other => {
                        return Err(Error::ParseError(format!(
                            "unsupported format {other:?}"
                        )));
                    }
                });
            }
            Some("comment") => {
                comments.push(words.collect::<Vec<_>>().join(" "));
            }
            Some("element") => {
                let name = words.next().unwrap_or("");
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::ParseError("duplicate vertex element".into()));
                    }
                    let count: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| Error::ParseError("bad vertex count".into()))?;
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    if vertex_count.is_none() {
                        // Skipping an unknown element's data before the
                        // vertices would need its full layout; require
                        // vertices first instead.
                        return Err(Error::ParseError(
                            "vertex element must come first".into(),
                        ));
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = words.next().unwrap_or("");
                if ty == "list" {
                    return Err(Error::ParseError(
                        "list properties are not supported on vertices".into(),
                    ));
                }
                let ty = PropType::parse(ty)?;
                let name = words
                    .next()
                    .ok_or_else(|| Error::ParseError("property without name".into()))?;
                props.push((ty, name.to_string()));
            }
            Some("end_header") => break,
            _ => {}
        }
    }

    let format = format.ok_or_else(|| Error::ParseError("missing format line".into()))?;
    let count = vertex_count.ok_or_else(|| Error::ParseError("missing vertex element".into()))?;
    if count == 0 {
        return Err(Error::ParseError("vertex element is empty".into()));
    }

    let find = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|(_, n)| n == name)
            .ok_or_else(|| Error::MissingProperty(format!("vertex property {name}")))
    };
    let xyz = [find("x")?, find("y")?, find("z")?];
    let rgb = [find("red")?, find("green")?, find("blue")?];
    for &i in &xyz {
        if !matches!(props[i].0, PropType::F32 | PropType::F64) {
            return Err(Error::ParseError(format!(
                "position property {} must be float",
                props[i].1
            )));
        }
    }
    let color_is_float = matches!(props[rgb[0]].0, PropType::F32 | PropType::F64);
    for &i in &rgb {
        let ok = if color_is_float {
            matches!(props[i].0, PropType::F32 | PropType::F64)
        } else {
            props[i].0 == PropType::U8
        };
        if !ok {
            return Err(Error::ParseError(
                "color properties must be uniformly uchar or float".into(),
            ));
        }
    }

    let mut values = vec![0.0f64; props.len()];
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);

    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| Error::ParseError("ascii body is not UTF-8".into()))?;
            let mut tokens = text.split_whitespace();
            for _ in 0..count {
                for slot in values.iter_mut() {
                    let tok = tokens.next().ok_or_else(|| {
                        Error::ParseError("ascii body ended before all vertices".into())
                    })?;
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|_| Error::ParseError(format!("bad number {tok:?}")))?;
                }
                positions.push([values[xyz[0]], values[xyz[1]], values[xyz[2]]]);
                colors.push([values[rgb[0]], values[rgb[1]], values[rgb[2]]]);
            }
        }
        PlyFormat::BinaryLe => {
            let record: usize = props.iter().map(|(t, _)| t.size()).sum();
            if body.len() < record * count {
                return Err(Error::ParseError(
                    "binary body ended before all vertices".into(),
                ));
            }
            for v in 0..count {
                let mut off = v * record;
                for (i, (ty, _)) in props.iter().enumerate() {
                    values[i] = ty.read_binary(&body[off..]);
                    off += ty.size();
                }
                positions.push([values[xyz[0]], values[xyz[1]], values[xyz[2]]]);
                colors.push([values[rgb[0]], values[rgb[1]], values[rgb[2]]]);
            }
        }
    }

    Ok(PlyVertices {
        positions,
        colors,
        color_is_float,
        comments,
    })
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header";
    let mut i = 0;
    while i + needle.len() <= bytes.len() {
        if &bytes[i..i + needle.len()] == needle {
            // Consume up to and including the line terminator.
            let mut j = i + needle.len();
            while j < bytes.len() && bytes[j] != b'\n' {
                j += 1;
            }
            if j == bytes.len() {
                return Err(Error::ParseError("unterminated end_header".into()));
            }
            return Ok(j + 1);
        }
        i += 1;
    }
    Err(Error::ParseError("missing end_header".into()))
}

/// Reads an input cloud: uchar colors, vertex order preserved.
pub fn read_ply(path: &Path) -> Result<RawPointCloud<f64>> {
    let bytes = fs::read(path)?;
    let ply = parse_ply(&bytes)?;
    if ply.color_is_float {
        return Err(Error::ParseError(
            "input clouds carry uchar colors; float colors belong to decoded frames".into(),
        ));
    }
    let colors: Vec<[u8; 3]> = ply
        .colors
        .iter()
        .map(|c| [c[0] as u8, c[1] as u8, c[2] as u8])
        .collect();
    RawPointCloud::new(ply.positions, colors)
}

/// Writes a voxelized frame as binary little-endian PLY: float positions
/// (voxel coordinates are small integers, exact in f32), double colors with
/// the frame's attributes mapped through the inverse color transform without
/// clamping, and depth/frame_index carried as comments.
pub fn write_ply(frame: &PointFrame<f64>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\n\
         comment depth {}\ncomment frame_index {}\n\
         element vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property double red\nproperty double green\nproperty double blue\n\
         end_header\n",
        frame.depth,
        frame.frame_index,
        frame.positions.len()
    )?;
    for (p, a) in frame.positions.iter().zip(&frame.attributes) {
        for c in 0..3 {
            out.extend_from_slice(&(p[c] as f32).to_le_bytes());
        }
        let rgb = yuv_real_to_rgb(*a);
        for c in 0..3 {
            out.extend_from_slice(&rgb[c].to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a frame written by [`write_ply`] back at full precision.
pub fn read_ply_frame(path: &Path) -> Result<PointFrame<f64>> {
    let bytes = fs::read(path)?;
    let ply = parse_ply(&bytes)?;
    let mut depth = None;
    let mut frame_index = None;
    for c in &ply.comments {
        let mut words = c.split_whitespace();
        match (words.next(), words.next()) {
            (Some("depth"), Some(v)) => depth = v.parse::<u8>().ok(),
            (Some("frame_index"), Some(v)) => frame_index = v.parse::<u32>().ok(),
            _ => {}
        }
    }
    let depth =
        depth.ok_or_else(|| Error::ParseError("decoded frame lacks depth comment".into()))?;
    let frame_index = frame_index
        .ok_or_else(|| Error::ParseError("decoded frame lacks frame_index comment".into()))?;

    let mut positions = Vec::with_capacity(ply.positions.len());
    for p in &ply.positions {
        let mut v = [0u32; 3];
        for c in 0..3 {
            let r = p[c].round();
            if (p[c] - r).abs() > 1e-6 || r < 0.0 || r >= (1u64 << depth) as f64 {
                return Err(Error::ParseError(format!(
                    "position {} is not a voxel coordinate at depth {depth}",
                    p[c]
                )));
            }
            v[c] = r as u32;
        }
        positions.push(v);
    }
    let attributes: Vec<[f64; 3]> = ply.colors.iter().map(|c| rgb_real_to_yuv(*c)).collect();
    PointFrame::new(frame_index, depth, positions, attributes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    const ASCII_FIXTURE: &str = "ply\n\
        format ascii 1.0\n\
        comment made by hand\n\
        element vertex 3\n\
        property float x\nproperty float y\nproperty float z\n\
        property uchar red\nproperty uchar green\nproperty uchar blue\n\
        end_header\n\
        0 0 0 255 0 0\n\
        1.5 2.25 -3 0 255 0\n\
        10 20 30 1 2 3\n";

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), bytes).unwrap();
        f
    }

    #[test]
    fn ascii_fixture_reads_exactly() {
        let f = write_temp(ASCII_FIXTURE.as_bytes());
        let cloud = read_ply(f.path()).unwrap();
        assert_eq!(cloud.positions.len(), 3);
        assert_eq!(cloud.positions[1], [1.5, 2.25, -3.0]);
        assert_eq!(cloud.colors[0], [255, 0, 0]);
        assert_eq!(cloud.colors[2], [1, 2, 3]);
    }

    #[test]
    fn binary_and_ascii_encodings_agree() {
        let mut bin = Vec::new();
        write!(
            bin,
            "ply\nformat binary_little_endian 1.0\nelement vertex 3\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n"
        )
        .unwrap();
        let pts = [
            ([0.0f32, 0.0, 0.0], [255u8, 0, 0]),
            ([1.5, 2.25, -3.0], [0, 255, 0]),
            ([10.0, 20.0, 30.0], [1, 2, 3]),
        ];
        for (p, c) in &pts {
            for v in p {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            bin.extend_from_slice(c);
        }
        let fa = write_temp(ASCII_FIXTURE.as_bytes());
        let fb = write_temp(&bin);
        let a = read_ply(fa.path()).unwrap();
        let b = read_ply(fb.path()).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.colors, b.colors);
    }

    #[test]
    fn empty_vertex_element_is_rejected() {
        let text = ASCII_FIXTURE.replace("element vertex 3", "element vertex 0");
        let f = write_temp(text.as_bytes());
        assert!(matches!(read_ply(f.path()), Err(Error::ParseError(_))));
    }

    #[test]
    fn missing_color_is_missing_property() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\n\
             end_header\n0 0 0\n";
        let f = write_temp(text.as_bytes());
        assert!(matches!(read_ply(f.path()), Err(Error::MissingProperty(_))));
    }

    #[test]
    fn extra_properties_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property uchar alpha\n\
             end_header\n\
             1 2 3 0.5 10 20 30 255\n\
             4 5 6 0.25 40 50 60 255\n";
        let f = write_temp(text.as_bytes());
        let cloud = read_ply(f.path()).unwrap();
        assert_eq!(cloud.positions[1], [4.0, 5.0, 6.0]);
        assert_eq!(cloud.colors[0], [10, 20, 30]);
    }

    #[test]
    fn truncated_binary_body_is_rejected() {
        let mut bin = Vec::new();
        write!(
            bin,
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n"
        )
        .unwrap();
        bin.extend_from_slice(&[0u8; 15]); // one record + 0 bytes of the next
        let f = write_temp(&bin);
        assert!(matches!(read_ply(f.path()), Err(Error::ParseError(_))));
    }

    #[test]
    fn list_property_on_vertices_is_rejected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\n\
             property list uchar int vertex_indices\n\
             end_header\n0\n";
        let f = write_temp(text.as_bytes());
        assert!(matches!(read_ply(f.path()), Err(Error::ParseError(_))));
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, depth: u8) -> PointFrame<f64> {
        let limit = 1u32 << depth;
        let mut cells = HashSet::new();
        while cells.len() < n {
            cells.insert([
                rng.gen_range(0..limit),
                rng.gen_range(0..limit),
                rng.gen_range(0..limit),
            ]);
        }
        let mut positions: Vec<[u32; 3]> = cells.into_iter().collect();
        positions.sort_by_key(|p| crate::frame::morton_code(*p));
        // Attributes beyond the nominal ranges must survive the file trip.
        let attributes = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-50.0..300.0),
                    rng.gen_range(-50.0..300.0),
                    rng.gen_range(-50.0..300.0),
                ]
            })
            .collect();
        PointFrame::new(7, depth, positions, attributes).unwrap()
    }

    #[test]
    fn frame_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let frame = random_frame(&mut rng, 200, 7);
            let f = tempfile::NamedTempFile::new().unwrap();
            write_ply(&frame, f.path()).unwrap();
            let back = read_ply_frame(f.path()).unwrap();
            assert_eq!(back.frame_index, frame.frame_index);
            assert_eq!(back.depth, frame.depth);
            assert_eq!(back.positions, frame.positions);
            for (a, b) in back.attributes.iter().zip(&frame.attributes) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn float_colored_files_are_cloud_reader_errors() {
        // Decoded frames (float colors) must go through read_ply_frame; the
        // uchar cloud reader refuses them instead of silently truncating.
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let frame = random_frame(&mut rng, 20, 5);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_ply(&frame, f.path()).unwrap();
        assert!(matches!(read_ply(f.path()), Err(Error::ParseError(_))));
    }
}
