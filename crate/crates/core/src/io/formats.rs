//! Mesh, image, landmark, JSON and CSV readers and writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mesh, Vec3};
use crate::render::{Image, MapKind};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// OBJ text with one `vt` per vertex (when the mesh has UVs) and faces
/// referencing both with the same index.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", num(v.x), num(v.y), num(v.z));
    }
    let with_uv = mesh.uv.len() == mesh.vertices.len() && !mesh.uv.is_empty();
    if with_uv {
        for t in &mesh.uv {
            let _ = writeln!(s, "vt {} {}", num(t[0]), num(t[1]));
        }
    }
    for f in &mesh.triangles {
        let [a, b, c] = f.map(|i| i + 1);
        if with_uv {
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    write_text(path, &obj_string(mesh))
}

fn obj_index(token: &str, count: usize, line: usize) -> Result<usize> {
    let i: i64 = token
        .parse()
        .map_err(|_| Error::format("obj", format!("line {line}: bad index `{token}`")))?;
    let resolved = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || resolved < 0 || resolved as usize >= count {
        return Err(Error::format(
            "obj",
            format!("line {line}: index {i} out of range"),
        ));
    }
    Ok(resolved as usize)
}

/// Parses `v`, `vt` and `f` records; polygons are fan-triangulated. A
/// vertex's UV is taken from the first face corner that references it.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut tex: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<Vec<(usize, Option<usize>)>> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut it = raw.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let nums = |it: std::str::SplitWhitespace, k: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = it
                .take(k)
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("obj", format!("line {line}: bad number")))?;
            if v.len() < k {
                return Err(Error::format(
                    "obj",
                    format!("line {line}: expected {k} numbers"),
                ));
            }
            Ok(v)
        };
        match tag {
            "v" => {
                let p = nums(it, 3)?;
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            "vt" => {
                let p = nums(it, 2)?;
                tex.push([p[0], p[1]]);
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let v = obj_index(parts.next().unwrap_or(""), vertices.len(), line)?;
                    let t = match parts.next() {
                        Some(s) if !s.is_empty() => Some(obj_index(s, tex.len(), line)?),
                        _ => None,
                    };
                    corners.push((v, t));
                }
                if corners.len() < 3 {
                    return Err(Error::format(
                        "obj",
                        format!("line {line}: face has fewer than 3 corners"),
                    ));
                }
                faces.push(corners);
            }
            _ => {}
        }
    }
    let mut triangles = Vec::new();
    let mut uv: Vec<Option<[f64; 2]>> = vec![None; vertices.len()];
    for f in &faces {
        for &(v, t) in f {
            if let (None, Some(t)) = (uv[v], t) {
                uv[v] = Some(tex[t]);
            }
        }
        for k in 1..f.len() - 1 {
            triangles.push([f[0].0, f[k].0, f[k + 1].0]);
        }
    }
    let uv = if !tex.is_empty() && uv.iter().all(Option::is_some) {
        uv.into_iter().flatten().collect()
    } else {
        Vec::new()
    };
    Ok(Mesh::new(vertices, triangles, uv))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&read_text(path)?)
}

/// PFM bytes (`Pf` for one channel, `PF` for three), little-endian `f32`,
/// rows bottom to top.
pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::format(
                "pfm",
                format!("{c} channels are not representable"),
            ))
        }
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    let row = image.width * image.channels;
    for y in (0..image.height).rev() {
        for v in &image.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], kind: MapKind) -> Result<Image> {
    let mut header = Vec::new();
    let mut pos = 0;
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pfm", "truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::format("pfm", format!("unknown tag `{t}`"))),
    };
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pfm", format!("bad size `{s}`")))
    };
    let (w, h) = (dim(&header[1])?, dim(&header[2])?);
    let scale: f64 = header[3]
        .parse()
        .map_err(|_| Error::format("pfm", format!("bad scale `{}`", header[3])))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != 4 * n {
        return Err(Error::Truncated {
            what: "pfm pixels".into(),
            expected: 4 * n,
            found: data.len(),
        });
    }
    let mut img = Image::new(w, h, channels, kind);
    let row = w * channels;
    for (k, c) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (k / row, k % row);
        img.data[(h - 1 - file_row) * row + col] = v as f64;
    }
    Ok(img)
}

pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pfm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path, kind: MapKind) -> Result<Image> {
    decode_pfm(&fs::read(path).map_err(|e| Error::io(path, e))?, kind)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// 8-bit PNG of a one- or three-channel image with values in `[0, 1]`.
pub fn write_png8(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| quantize(*v, 255.0) as u8)
        .collect();
    let (w, h) = (image.width as u32, image.height as u32);
    match image.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => {
            return Err(Error::format(
                "png",
                format!("{c} channels are not supported"),
            ))
        }
    }
    .expect("buffer matches the image size")?;
    Ok(())
}

/// Reads an 8- or 16-bit PNG into `[0, 1]` values (gray or RGB).
pub fn read_png(path: &Path, kind: MapKind) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8
            | image::ColorType::L16
            | image::ColorType::La8
            | image::ColorType::La16
    );
    let (channels, data) = if gray {
        (1, img.into_luma16().into_raw())
    } else {
        (3, img.into_rgb16().into_raw())
    };
    Image::from_data(
        w,
        h,
        channels,
        kind,
        data.into_iter().map(|v| v as f64 / 65535.0).collect(),
    )
}

/// 16-bit grayscale PNG mapping `[-scale, scale]` linearly onto `[0, 65535]`.
/// Values outside the range are clamped; the step is `2 scale / 65535`.
pub fn write_displacement_png16(path: &Path, disp: &Image, scale: f64) -> Result<()> {
    if disp.channels != 1 {
        return Err(Error::format("png", "displacement maps have one channel"));
    }
    let q: Vec<u16> = disp
        .data
        .iter()
        .map(|v| quantize((v + scale) / (2.0 * scale), 65535.0) as u16)
        .collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(disp.width as u32, disp.height as u32, q)
        .expect("buffer matches the image size")
        .save(path)?;
    Ok(())
}

pub fn read_displacement_png16(path: &Path, scale: f64) -> Result<Image> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|q| q as f64 / 65535.0 * 2.0 * scale - scale)
        .collect();
    Image::from_data(w, h, 1, MapKind::Displacement, data)
}

/// One `x y` pair per line; blank lines and `#` comments are skipped.
pub fn parse_landmarks(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("landmarks", format!("line {}: bad number", ln + 1)))?;
        if v.len() != 2 {
            return Err(Error::format(
                "landmarks",
                format!("line {}: expected 2 values", ln + 1),
            ));
        }
        out.push([v[0], v[1]]);
    }
    Ok(out)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<[f64; 2]>> {
    parse_landmarks(&read_text(path)?)
}

pub fn write_landmarks(path: &Path, landmarks: &[[f64; 2]]) -> Result<()> {
    let mut s = String::new();
    for p in landmarks {
        let _ = writeln!(s, "{} {}", num(p[0]), num(p[1]));
    }
    write_text(path, &s)
}

/// 3D landmarks, one `x y z` per line.
pub fn read_landmarks3(path: &Path) -> Result<Vec<Vec3>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("landmarks", format!("line {}: bad number", ln + 1)))?;
        if v.len() != 3 {
            return Err(Error::format(
                "landmarks",
                format!("line {}: expected 3 values", ln + 1),
            ));
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn write_landmarks3(path: &Path, landmarks: &[Vec3]) -> Result<()> {
    let mut s = String::new();
    for p in landmarks {
        let _ = writeln!(s, "{} {} {}", num(p.x), num(p.y), num(p.z));
    }
    write_text(path, &s)
}

/// Pretty JSON; floats are written with enough digits to round-trip.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Comma-separated rows under `header`.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.into_iter().map(num).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

/// Coarse or detail fit trace; one column per loss term.
pub fn write_trace_csv(path: &Path, trace: &crate::pipeline::FitTrace) -> Result<()> {
    let terms = trace.term_names();
    let mut s = String::from("stage,iteration,lr,total,best");
    for t in &terms {
        let _ = write!(s, ",{t}");
    }
    s.push('\n');
    for r in &trace.rows {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.stage,
            r.iteration,
            num(r.lr),
            num(r.total),
            num(r.best)
        );
        for t in &terms {
            let _ = write!(s, ",{}", r.terms.get(t).map_or(String::new(), |v| num(*v)));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn write_train_csv(path: &Path, rows: &[crate::pipeline::TrainRow]) -> Result<()> {
    write_csv(
        path,
        &["iteration", "detail", "dc", "total"],
        rows.iter()
            .map(|r| vec![r.iteration as f64, r.detail, r.dc, r.total]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synthesize_toy_model, ToyModelSpec};
    use proptest::prelude::*;

    #[test]
    fn obj_round_trip() {
        let m = synthesize_toy_model(&ToyModelSpec {
            subdivisions: 1,
            ..Default::default()
        });
        let mesh = m.template_mesh();
        let back = parse_obj(&obj_string(&mesh)).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.uv, mesh.uv);
    }

    #[test]
    fn obj_polygons_and_relative_indices() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\nf 1//1 2//2 3//3\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
        assert!(m.uv.is_empty());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(parse_obj("v 0 0\n").is_err());
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut img = Image::new(5, 3, 3, MapKind::Normal);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i as f64 * 0.37).sin() * 1e3) as f32 as f64;
        }
        img.data[4] = -0.0;
        let bytes = encode_pfm(&img).unwrap();
        let back = decode_pfm(&bytes, MapKind::Normal).unwrap();
        assert_eq!(back.width, 5);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_pfm(&back).unwrap(), bytes);
        assert!(matches!(
            decode_pfm(&bytes[..bytes.len() - 1], MapKind::Normal),
            Err(Error::Truncated { .. })
        ));
        let mono = Image::filled(2, 2, 1, MapKind::Displacement, 0.25);
        assert_eq!(
            decode_pfm(&encode_pfm(&mono).unwrap(), MapKind::Displacement).unwrap(),
            mono
        );
    }

    #[test]
    fn png_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 2, 3, MapKind::Color);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 23.0;
        }
        let p = dir.path().join("a.png");
        write_png8(&p, &img).unwrap();
        let back = read_png(&p, MapKind::Color).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mut d = Image::new(3, 3, 1, MapKind::Displacement);
        for (i, v) in d.data.iter_mut().enumerate() {
            *v = -0.01 + 0.0025 * i as f64;
        }
        let p = dir.path().join("d.png");
        write_displacement_png16(&p, &d, 0.01).unwrap();
        let back = read_displacement_png16(&p, 0.01).unwrap();
        for (a, b) in back.data.iter().zip(&d.data) {
            assert!((a - b).abs() <= 0.01 / 65535.0 + 1e-15);
        }
        assert_eq!(back.data[0], -0.01);
        assert_eq!(back.data[8], 0.01);
    }

    #[test]
    fn landmark_text() {
        let lm = parse_landmarks("# header\n1 2\n3.5, -4\n\n").unwrap();
        assert_eq!(lm, vec![[1.0, 2.0], [3.5, -4.0]]);
        assert!(parse_landmarks("1 2 3\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        let pts: Vec<[f64; 2]> = (0..68).map(|i| [i as f64 / 3.0, 0.1 * i as f64]).collect();
        write_landmarks(&p, &pts).unwrap();
        assert_eq!(read_landmarks(&p).unwrap(), pts);
    }

    proptest! {
        #[test]
        fn float_text_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            prop_assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
