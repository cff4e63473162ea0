//! On-disk formats: binary little-endian PLY for Gaussians and LiDAR points,
//! PFM for depth/normal maps and 8-bit PNG for images.
//!
//! Gaussian PLY layout, one `float` property each, in this order:
//! `x y z rot_0..rot_3 log_scale_0..log_scale_2 logit_opacity sh_0..sh_{3K-1}`
//! where the SH block is coefficient-major (`sh_{3k+c}` is channel `c` of
//! basis function `k`) and `K = (degree+1)²`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{DepthNormalMaps, Gaussian, GaussianSet, Image, LidarCloud};
use crate::sh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PropType {
    F32,
    F64,
}

impl PropType {
    fn size(self) -> usize {
        match self {
            PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }
}

struct PlyHeader {
    count: usize,
    props: Vec<(String, PropType)>,
    body_offset: usize,
}

fn ply_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Ply {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<PlyHeader> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String)> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ply_err(start, "truncated header: missing end_header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| ply_err(start, "header is not valid text"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(ply_err(at, "missing 'ply' magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    loop {
        let (at, line) = next_line(&mut offset)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(ply_err(at, format!("unsupported format '{fmt}'")));
                }
                format_seen = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| ply_err(at, format!("bad element count '{n}'")))?,
                    );
                } else if n.parse::<usize>().ok() != Some(0) {
                    return Err(ply_err(at, format!("unsupported non-empty element '{name}'")));
                }
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                let ty = match *ty {
                    "float" | "float32" => PropType::F32,
                    "double" | "float64" => PropType::F64,
                    other => {
                        return Err(ply_err(at, format!("unsupported property type '{other}'")))
                    }
                };
                props.push((name.to_string(), ty));
            }
            _ => return Err(ply_err(at, format!("malformed header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(ply_err(0, "missing format line"));
    }
    let count = count.ok_or_else(|| ply_err(offset, "missing vertex element"))?;
    Ok(PlyHeader {
        count,
        props,
        body_offset: offset,
    })
}

/// Reads the vertex table as rows of f64, checking size and finiteness.
fn read_rows(bytes: &[u8], header: &PlyHeader) -> Result<Vec<Vec<f64>>> {
    let stride: usize = header.props.iter().map(|(_, t)| t.size()).sum();
    let need = header.count * stride;
    let have = bytes.len() - header.body_offset;
    if have < need {
        return Err(ply_err(
            bytes.len(),
            format!(
                "truncated vertex data: expected {need} bytes for {} vertices, found {have}",
                header.count
            ),
        ));
    }
    let mut rows = Vec::with_capacity(header.count);
    let mut at = header.body_offset;
    for _ in 0..header.count {
        let mut row = Vec::with_capacity(header.props.len());
        for (name, ty) in &header.props {
            let v = match ty {
                PropType::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64,
                PropType::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
            };
            if !v.is_finite() {
                return Err(ply_err(at, format!("non-finite value in property '{name}'")));
            }
            row.push(v);
            at += ty.size();
        }
        rows.push(row);
    }
    Ok(rows)
}

fn column(header: &PlyHeader, name: &str) -> Result<usize> {
    header
        .props
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| ply_err(header.body_offset, format!("missing property '{name}'")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_header(out: &mut Vec<u8>, count: usize, comments: &[String], names: &[String]) {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    for c in comments {
        h.push_str(&format!("comment {c}\n"));
    }
    h.push_str(&format!("element vertex {count}\n"));
    for n in names {
        h.push_str(&format!("property float {n}\n"));
    }
    h.push_str("end_header\n");
    out.extend_from_slice(h.as_bytes());
}

fn gaussian_property_names(sh_count: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("log_scale_{i}")));
    names.push("logit_opacity".into());
    names.extend((0..3 * sh_count).map(|i| format!("sh_{i}")));
    names
}

/// Serializes a Gaussian set as float32 PLY bytes.
pub fn gaussians_to_ply_bytes(set: &GaussianSet) -> Result<Vec<u8>> {
    set.validate()?;
    let k = set.sh_count();
    let names = gaussian_property_names(k);
    let mut out = Vec::new();
    write_header(
        &mut out,
        set.len(),
        &[format!("sh_degree {}", set.sh_degree)],
        &names,
    );
    for g in &set.gaussians {
        let mut vals: Vec<f64> = Vec::with_capacity(names.len());
        vals.extend(g.position.iter());
        vals.extend(g.rotation.iter());
        vals.extend(g.log_scale.iter());
        vals.push(g.logit_opacity);
        vals.extend(g.sh.iter().flatten());
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_ply_gaussians(set: &GaussianSet, path: &Path) -> Result<()> {
    write_file(path, &gaussians_to_ply_bytes(set)?)
}

pub fn gaussians_from_ply_bytes(bytes: &[u8]) -> Result<GaussianSet> {
    let header = parse_header(bytes)?;
    let sh_props = header
        .props
        .iter()
        .filter(|(n, _)| n.starts_with("sh_"))
        .count();
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| 3 * sh::coeff_count(d) == sh_props)
        .ok_or_else(|| {
            ply_err(
                header.body_offset,
                format!("{sh_props} SH properties do not match any degree 0..=3"),
            )
        })?;
    let names = gaussian_property_names(sh::coeff_count(degree));
    let cols = names
        .iter()
        .map(|n| column(&header, n))
        .collect::<Result<Vec<_>>>()?;
    let rows = read_rows(bytes, &header)?;
    let gaussians = rows
        .into_iter()
        .map(|row| {
            let v: Vec<f64> = cols.iter().map(|&c| row[c]).collect();
            Gaussian {
                position: Vector3::new(v[0], v[1], v[2]),
                rotation: [v[3], v[4], v[5], v[6]],
                log_scale: Vector3::new(v[7], v[8], v[9]),
                logit_opacity: v[10],
                sh: v[11..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            }
        })
        .collect();
    Ok(GaussianSet::new(degree, gaussians))
}

pub fn load_ply_gaussians(path: &Path) -> Result<GaussianSet> {
    gaussians_from_ply_bytes(&read_file(path)?)
}

/// Writes points (and normals, if given) as float32 PLY.
pub fn save_ply_points(
    points: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
    path: &Path,
) -> Result<()> {
    let mut names: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
    if let Some(n) = normals {
        if n.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} normals for {} points",
                n.len(),
                points.len()
            )));
        }
        names.extend(["nx".into(), "ny".into(), "nz".into()]);
    }
    let mut out = Vec::new();
    write_header(&mut out, points.len(), &[], &names);
    for (i, p) in points.iter().enumerate() {
        let mut vals: Vec<f64> = p.iter().copied().collect();
        if let Some(n) = normals {
            vals.extend(n[i].iter());
        }
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn save_lidar_cloud(cloud: &LidarCloud, path: &Path) -> Result<()> {
    save_ply_points(&cloud.points, Some(&cloud.normals), path)
}

/// Parses a point PLY into positions and optional normals.
pub fn points_from_ply_bytes(bytes: &[u8]) -> Result<(Vec<Vector3<f64>>, Option<Vec<Vector3<f64>>>)> {
    let header = parse_header(bytes)?;
    let xyz = [column(&header, "x")?, column(&header, "y")?, column(&header, "z")?];
    let has_normals = ["nx", "ny", "nz"]
        .iter()
        .all(|n| header.props.iter().any(|(p, _)| p == n));
    let nxyz = if has_normals {
        Some([
            column(&header, "nx")?,
            column(&header, "ny")?,
            column(&header, "nz")?,
        ])
    } else {
        None
    };
    let rows = read_rows(bytes, &header)?;
    let points = rows
        .iter()
        .map(|r| Vector3::new(r[xyz[0]], r[xyz[1]], r[xyz[2]]))
        .collect();
    let normals = nxyz.map(|c| {
        rows.iter()
            .map(|r| Vector3::new(r[c[0]], r[c[1]], r[c[2]]))
            .collect()
    });
    Ok((points, normals))
}

/// Loads a LiDAR cloud; normals are estimated when the file has none.
pub fn load_ply_points(path: &Path) -> Result<LidarCloud> {
    let (points, normals) = points_from_ply_bytes(&read_file(path)?)?;
    LidarCloud::new(points, normals)
}

/// Writes a PFM with `channels` (1 or 3) floats per pixel, rows stored
/// top-to-bottom in `data` and flipped to PFM's bottom-up order on disk.
pub fn save_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::Pfm(format!("unsupported channel count {channels}")));
    }
    if data.len() != width * height * channels {
        return Err(Error::ShapeMismatch(format!(
            "PFM data has {} values, expected {}",
            data.len(),
            width * height * channels
        )));
    }
    let tag = if channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

/// Reads a PFM; returns `(width, height, channels, data)` with rows
/// top-to-bottom.
pub fn load_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Pfm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).to_string());
    }
    at += 1;
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Pfm(format!("bad magic '{t}'"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Pfm(format!("bad dimension '{s}'")));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| Error::Pfm(format!("bad scale '{}'", fields[3])))?;
    let n = width * height * channels;
    if bytes.len() < at + 4 * n {
        return Err(Error::Pfm("truncated pixel data".into()));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in bytes[at..at + 4 * n].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, rest) = (i / (width * channels), i % (width * channels));
        data[(height - 1 - row) * width * channels + rest] = v as f64;
    }
    Ok((width, height, channels, data))
}

/// Writes depth (`depth.pfm`, 0 where invalid) and normal (`normal.pfm`,
/// zero vector where invalid) maps.
pub fn save_depth_normal(maps: &DepthNormalMaps, depth_path: &Path, normal_path: &Path) -> Result<()> {
    let depth: Vec<f64> = (0..maps.depth.len())
        .map(|p| if maps.valid[p] { maps.depth[p] } else { 0.0 })
        .collect();
    let normal: Vec<f64> = (0..maps.depth.len())
        .flat_map(|p| {
            let n = if maps.valid[p] { maps.normal[p] } else { Vector3::zeros() };
            [n.x, n.y, n.z]
        })
        .collect();
    save_pfm(depth_path, maps.width, maps.height, 1, &depth)?;
    save_pfm(normal_path, maps.width, maps.height, 3, &normal)
}

pub fn load_depth_normal(depth_path: &Path, normal_path: &Path) -> Result<DepthNormalMaps> {
    let (w, h, c, depth) = load_pfm(depth_path)?;
    let (wn, hn, cn, normal) = load_pfm(normal_path)?;
    if c != 1 || cn != 3 || w != wn || h != hn {
        return Err(Error::ShapeMismatch(
            "depth must be 1-channel and normal 3-channel PFMs of equal size".into(),
        ));
    }
    let mut maps = DepthNormalMaps::invalid(w, h);
    for p in 0..w * h {
        let n = Vector3::new(normal[3 * p], normal[3 * p + 1], normal[3 * p + 2]);
        if depth[p] > 0.0 && n.norm() > 0.0 {
            maps.valid[p] = true;
            maps.depth[p] = depth[p];
            maps.normal[p] = n.normalize();
            maps.sample_uv[p] = [(p % w) as f64 + 0.5, (p / w) as f64 + 0.5];
        }
    }
    Ok(maps)
}

/// Writes an 8-bit gray or RGB PNG, clamping to [0,1].
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Image(format!("cannot write {c}-channel PNG"))),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Reads a PNG as an RGB image in [0,1].
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_data(w, h, 3, data)
}
