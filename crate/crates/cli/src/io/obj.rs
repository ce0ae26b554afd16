//! Wavefront OBJ export and import.
//!
//! Numbers are written with 9 significant digits (`%.9g` style) so the output
//! is byte-stable across platforms. Two texture modes exist: per-vertex color
//! (`v x y z r g b`) and a per-triangle atlas where every face gets its own
//! square chart in a PNG referenced through an MTL file.

use std::fmt::Write as _;
use std::path::Path;

use texmesh::isosurface::SurfaceMesh;
use texmesh::render::Image;
use texmesh::{Error, Vec3};

use super::image::write_png;

/// `%.9g`: 9 significant digits, trailing zeros dropped, exponent form only
/// for very small or very large magnitudes.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mant}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn check_mesh(mesh: &SurfaceMesh) -> texmesh::Result<()> {
    mesh.validate()?;
    if mesh.vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::invalid("mesh has non-finite vertex coordinates"));
    }
    Ok(())
}

fn push_vertex(out: &mut String, v: &Vec3, color: Option<&[f64; 3]>) {
    let _ = write!(out, "v {} {} {}", fmt_sig9(v.x), fmt_sig9(v.y), fmt_sig9(v.z));
    if let Some(c) = color {
        let _ = write!(out, " {} {} {}", fmt_sig9(c[0]), fmt_sig9(c[1]), fmt_sig9(c[2]));
    }
    out.push('\n');
}

/// OBJ text with optional per-vertex colors. Indices are 1-based.
pub fn obj_string(mesh: &SurfaceMesh, colors: Option<&[[f64; 3]]>) -> texmesh::Result<String> {
    check_mesh(mesh)?;
    if let Some(c) = colors {
        if c.len() != mesh.vertices.len() {
            return Err(Error::invalid(format!("{} colors for {} vertices", c.len(), mesh.vertices.len())));
        }
    }
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        push_vertex(&mut out, v, colors.map(|c| &c[i]));
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    Ok(out)
}

pub fn write_obj(path: &Path, mesh: &SurfaceMesh, colors: Option<&[[f64; 3]]>) -> texmesh::Result<()> {
    std::fs::write(path, obj_string(mesh, colors)?)?;
    Ok(())
}

/// Per-triangle texture atlas. Face `f` owns the `cell x cell` texel square at
/// column `f % cols`, row `f / cols`; its triangle is the lower-left half of
/// that square inset by one texel.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub cell: usize,
    pub cols: usize,
    /// Texture side length in texels (`cols * cell`).
    pub size: usize,
    /// Per face, the OBJ texture coordinates of its three corners.
    pub uv: Vec<[[f64; 2]; 3]>,
    pub image: Image,
}

impl Atlas {
    /// Chart rectangle `[u0, v0, u1, v1]` of face `f` in OBJ texture space.
    pub fn chart_rect(&self, f: usize) -> [f64; 4] {
        let (col, row) = (f % self.cols, f / self.cols);
        let s = self.size as f64;
        let (x0, y0) = ((col * self.cell) as f64, (row * self.cell) as f64);
        let c = self.cell as f64;
        [x0 / s, 1.0 - (y0 + c) / s, (x0 + c) / s, 1.0 - y0 / s]
    }
}

/// Pack every face into its own chart and fill the texels with `color`
/// evaluated at the corresponding surface point. Texels outside a chart's
/// triangle take the color of the nearest point on it, which keeps bilinear
/// lookups at the edges clean.
pub fn build_atlas(mesh: &SurfaceMesh, cell: usize, color: impl Fn(&Vec3) -> [f64; 3]) -> texmesh::Result<Atlas> {
    check_mesh(mesh)?;
    if cell < 4 {
        return Err(Error::invalid(format!("atlas cell must be at least 4 texels, got {cell}")));
    }
    let nf = mesh.faces.len().max(1);
    let cols = (nf as f64).sqrt().ceil() as usize;
    let size = cols * cell;
    let mut image = Image::new(size, size, 3);
    let mut uv = Vec::with_capacity(mesh.faces.len());
    let lo = 1.0;
    let hi = cell as f64 - 1.0;
    for f in 0..mesh.faces.len() {
        let (x0, y0) = (((f % cols) * cell) as f64, ((f / cols) * cell) as f64);
        // texel-space corners; the right angle sits at the chart's bottom-left
        let corners = [(x0 + lo, y0 + hi), (x0 + hi, y0 + hi), (x0 + lo, y0 + lo)];
        uv.push(corners.map(|(x, y)| [x / size as f64, 1.0 - y / size as f64]));
        let [a, b, c] = mesh.face_vertices(f);
        let span = hi - lo;
        for ty in 0..cell {
            for tx in 0..cell {
                let px = x0 + tx as f64 + 0.5;
                let py = y0 + ty as f64 + 0.5;
                // right-triangle barycentrics, clamped onto the triangle
                let mut s = ((px - corners[0].0) / span).clamp(0.0, 1.0);
                let mut t = ((corners[0].1 - py) / span).clamp(0.0, 1.0);
                if s + t > 1.0 {
                    let k = s + t;
                    s /= k;
                    t /= k;
                }
                let p = a * (1.0 - s - t) + b * s + c * t;
                let col = color(&p);
                let idx = (y0 as usize + ty) * size + x0 as usize + tx;
                image.pixel_mut(idx).copy_from_slice(&col);
            }
        }
    }
    Ok(Atlas { cell, cols, size, uv, image })
}

/// Write `<stem>.obj`, `<stem>.mtl` and `<stem>.png` next to `obj_path`.
pub fn write_obj_atlas(obj_path: &Path, mesh: &SurfaceMesh, atlas: &Atlas) -> texmesh::Result<()> {
    check_mesh(mesh)?;
    if atlas.uv.len() != mesh.faces.len() {
        return Err(Error::invalid("atlas was built for a different mesh"));
    }
    let stem = obj_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output path {}", obj_path.display())))?;
    let mtl_name = format!("{stem}.mtl");
    let png_name = format!("{stem}.png");
    let mut out = format!("mtllib {mtl_name}\n");
    for v in &mesh.vertices {
        push_vertex(&mut out, v, None);
    }
    for tri in &atlas.uv {
        for t in tri {
            let _ = writeln!(out, "vt {} {}", fmt_sig9(t[0]), fmt_sig9(t[1]));
        }
    }
    out.push_str("usemtl atlas\n");
    for (k, f) in mesh.faces.iter().enumerate() {
        let t = 3 * k + 1;
        let _ = writeln!(out, "f {}/{} {}/{} {}/{}", f[0] + 1, t, f[1] + 1, t + 1, f[2] + 1, t + 2);
    }
    std::fs::write(obj_path, out)?;
    std::fs::write(obj_path.with_file_name(&mtl_name), format!("newmtl atlas\nKd 1 1 1\nmap_Kd {png_name}\n"))?;
    write_png(&obj_path.with_file_name(&png_name), &atlas.image)
}

/// Parsed OBJ contents. Polygons are fan-triangulated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjData {
    pub mesh: SurfaceMesh,
    /// Present when every `v` line carries an RGB triple.
    pub colors: Option<Vec<[f64; 3]>>,
    pub texcoords: Vec<[f64; 2]>,
    /// Per triangle texture indices (0-based); empty when faces carry none.
    pub face_texcoords: Vec<[u32; 3]>,
    pub mtllib: Option<String>,
}

fn resolve(tok: &str, count: usize, offset: usize, what: &str) -> texmesh::Result<u32> {
    let i: i64 = tok
        .parse()
        .map_err(|_| Error::parse(offset, format!("bad {what} index {tok:?}")))?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        -1
    };
    if idx < 0 || idx >= count as i64 {
        return Err(Error::parse(offset, format!("{what} index {i} out of range (have {count})")));
    }
    Ok(idx as u32)
}

pub fn parse_obj(text: &str) -> texmesh::Result<ObjData> {
    let mut out = ObjData::default();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut colored: Option<bool> = None;
    let mut textured: Option<bool> = None;
    let mut offset = 0usize;
    for raw in text.split_inclusive('\n') {
        let line_start = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        let nums = |rest: &[&str]| -> texmesh::Result<Vec<f64>> {
            rest.iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(line_start, format!("bad number {t:?}")))
                })
                .collect()
        };
        match key {
            "v" => {
                let v = nums(&rest)?;
                let has_color = match v.len() {
                    3 | 4 => false,
                    6 => true,
                    n => return Err(Error::parse(line_start, format!("vertex has {n} values, expected 3 or 6"))),
                };
                if *colored.get_or_insert(has_color) != has_color {
                    return Err(Error::parse(line_start, "vertex colors must be given on every v line or none"));
                }
                out.mesh.vertices.push(Vec3::new(v[0], v[1], v[2]));
                if has_color {
                    colors.push([v[3], v[4], v[5]]);
                }
            }
            "vt" => {
                let t = nums(&rest)?;
                if !(2..=3).contains(&t.len()) {
                    return Err(Error::parse(line_start, format!("texture coordinate has {} values", t.len())));
                }
                out.texcoords.push([t[0], t[1]]);
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse(line_start, "face needs at least 3 vertices"));
                }
                let mut vi = Vec::with_capacity(rest.len());
                let mut ti = Vec::with_capacity(rest.len());
                for corner in &rest {
                    let mut parts = corner.split('/');
                    vi.push(resolve(parts.next().unwrap_or(""), out.mesh.vertices.len(), line_start, "vertex")?);
                    match parts.next() {
                        Some(t) if !t.is_empty() => ti.push(resolve(t, out.texcoords.len(), line_start, "texture")?),
                        _ => {}
                    }
                }
                let has_tex = !ti.is_empty();
                if has_tex && ti.len() != vi.len() {
                    return Err(Error::parse(line_start, "texture indices on some corners only"));
                }
                if *textured.get_or_insert(has_tex) != has_tex {
                    return Err(Error::parse(line_start, "texture indices must be given on every face or none"));
                }
                for k in 1..vi.len() - 1 {
                    out.mesh.faces.push([vi[0], vi[k], vi[k + 1]]);
                    if has_tex {
                        out.face_texcoords.push([ti[0], ti[k], ti[k + 1]]);
                    }
                }
            }
            "mtllib" => out.mtllib = rest.first().map(|s| s.to_string()),
            // normals, groups, smoothing and material switches carry nothing we use
            _ => {}
        }
    }
    if colored == Some(true) {
        out.colors = Some(colors);
    }
    Ok(out)
}

pub fn read_obj(path: &Path) -> texmesh::Result<ObjData> {
    parse_obj(&std::fs::read_to_string(path)?)
}
