//! Software rasterizer producing a G-buffer, texture shading, silhouette
//! antialiasing and the backward passes that carry image gradients back to
//! mesh vertices.
//!
//! Pixel `(i, j)` (column, row) has its center at `(i + 0.5, j + 0.5)` in pixel
//! coordinates; row 0 is the top of the image.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::isosurface::SurfaceMesh;
use crate::math::Vec3;

/// Field of view used throughout (degrees).
pub const DEFAULT_FOV_DEG: f64 = 49.13;
pub const DEFAULT_RADIUS: f64 = 1.2;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Camera-space depth below which geometry is discarded.
pub const NEAR: f64 = 1e-3;

const UP: Vec3 = Vec3::new(0.0, 1.0, 0.0);
const ROW_BAND: usize = 8;

/// Pinhole camera on a sphere around the origin, looking at the origin with +y up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fov_y_deg: f64,
    pub radius: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub eye: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// `tan(fov_y / 2)`.
    pub tan_half: f64,
    pub aspect: f64,
}

impl Camera {
    pub fn new(fov_y_deg: f64, radius: f64, azimuth: f64, elevation: f64, width: usize, height: usize) -> Result<Self> {
        let c = Self {
            fov_y_deg,
            radius,
            azimuth,
            elevation,
            width,
            height,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0, "fov must be in (0, 180) degrees, got {}", self.fov_y_deg);
        ensure!(self.radius > 0.0 && self.radius.is_finite(), "camera radius must be positive");
        ensure!(self.azimuth.is_finite(), "azimuth must be finite");
        ensure!(
            self.elevation.abs() < std::f64::consts::FRAC_PI_2,
            "elevation must be strictly inside (-pi/2, pi/2)"
        );
        ensure!(self.width > 0 && self.height > 0, "image size must be nonzero");
        Ok(())
    }

    pub fn eye(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(ce * sa, se, ce * ca) * self.radius
    }

    pub fn frame(&self) -> Frame {
        let eye = self.eye();
        let forward = (-eye).normalize();
        let right = forward.cross(&UP).normalize();
        let up = right.cross(&forward);
        Frame {
            eye,
            forward,
            right,
            up,
            tan_half: (self.fov_y_deg.to_radians() * 0.5).tan(),
            aspect: self.width as f64 / self.height as f64,
        }
    }
}

impl Frame {
    /// Unit ray direction through pixel-coordinate point `(x, y)`.
    pub fn ray_dir(&self, x: f64, y: f64, w: usize, h: usize) -> Vec3 {
        let nx = (2.0 * x / w as f64 - 1.0) * self.tan_half * self.aspect;
        let ny = (1.0 - 2.0 * y / h as f64) * self.tan_half;
        (self.forward + self.right * nx + self.up * ny).normalize()
    }

    /// Pixel coordinates and camera-space depth of `p`.
    pub fn project(&self, p: &Vec3, w: usize, h: usize) -> (f64, f64, f64) {
        let q = p - self.eye;
        let z = q.dot(&self.forward);
        let x = q.dot(&self.right) / (z * self.tan_half * self.aspect);
        let y = q.dot(&self.up) / (z * self.tan_half);
        (0.5 * w as f64 * (1.0 + x), 0.5 * h as f64 * (1.0 - y), z)
    }

    /// Gradients of the projected pixel coordinates `(px, py)` w.r.t. `p`.
    pub fn project_jacobian(&self, p: &Vec3, w: usize, h: usize) -> (Vec3, Vec3) {
        let q = p - self.eye;
        let z = q.dot(&self.forward);
        let x = q.dot(&self.right);
        let y = q.dot(&self.up);
        let sx = 0.5 * w as f64 / (self.tan_half * self.aspect);
        let sy = -0.5 * h as f64 / self.tan_half;
        (
            (self.right / z - self.forward * (x / (z * z))) * sx,
            (self.up / z - self.forward * (y / (z * z))) * sy,
        )
    }
}

/// Uniform camera distribution over azimuth and elevation ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDistribution {
    pub azimuth_range: [f64; 2],
    pub elevation_range: [f64; 2],
    pub fov_y_deg: f64,
    pub radius: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            azimuth_range: [0.0, 2.0 * std::f64::consts::PI],
            elevation_range: [0.0, 0.5],
            fov_y_deg: DEFAULT_FOV_DEG,
            radius: DEFAULT_RADIUS,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl CameraDistribution {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.azimuth_range[0] <= self.azimuth_range[1], "azimuth range is empty");
        ensure!(self.elevation_range[0] <= self.elevation_range[1], "elevation range is empty");
        Camera::new(self.fov_y_deg, self.radius, self.azimuth_range[0], self.elevation_range[0], self.width, self.height)?;
        Camera::new(self.fov_y_deg, self.radius, self.azimuth_range[1], self.elevation_range[1], self.width, self.height)?;
        Ok(())
    }
}

fn uniform(r: [f64; 2], rng: &mut impl Rng) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        r[0] + (r[1] - r[0]) * rng.random::<f64>()
    }
}

/// Draw a camera uniformly from the distribution's ranges.
pub fn sample_camera(dist: &CameraDistribution, rng: &mut impl Rng) -> Result<Camera> {
    dist.validate()?;
    let azimuth = uniform(dist.azimuth_range, rng);
    let elevation = uniform(dist.elevation_range, rng);
    Camera::new(dist.fov_y_deg, dist.radius, azimuth, elevation, dist.width, dist.height)
}

/// Row-major multi-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel rasterization output.
#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub triangle: Vec<Option<u32>>,
    pub bary: Vec<[f64; 3]>,
    /// Camera-space depth, `+inf` for uncovered pixels.
    pub depth: Vec<f64>,
    pub position: Vec<Vec3>,
    /// Ray parameter of the hit (distance from the eye), used by the backward pass.
    pub ray_t: Vec<f64>,
    /// Number of mesh faces this buffer was rasterized from.
    pub num_faces: usize,
}

impl GBuffer {
    fn empty(width: usize, height: usize, num_faces: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            triangle: vec![None; n],
            bary: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
            position: vec![Vec3::zeros(); n],
            ray_t: vec![f64::INFINITY; n],
            num_faces,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn covered(&self, idx: usize) -> bool {
        self.triangle[idx].is_some()
    }

    pub fn mask(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.triangle.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.triangle.iter().filter(|t| t.is_some()).count() as f64 / self.num_pixels() as f64
    }

    fn check_mesh(&self, mesh: &SurfaceMesh, cam: &Camera) -> Result<()> {
        ensure!(
            self.width == cam.width && self.height == cam.height,
            "G-buffer is {}x{} but camera is {}x{}",
            self.width,
            self.height,
            cam.width,
            cam.height
        );
        ensure!(
            self.num_faces == mesh.faces.len(),
            "G-buffer was rasterized from {} faces, mesh has {}",
            self.num_faces,
            mesh.faces.len()
        );
        Ok(())
    }
}

/// Möller–Trumbore ray/triangle intersection, returning `(t, b1, b2)`.
fn intersect(o: &Vec3, d: &Vec3, v: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - v[0];
    let b1 = s.dot(&p) * inv;
    let q = s.cross(&e1);
    let b2 = d.dot(&q) * inv;
    let t = e2.dot(&q) * inv;
    Some((t, b1, b2))
}

struct Projected {
    xy: Vec<[f64; 2]>,
    z: Vec<f64>,
}

fn project_mesh(mesh: &SurfaceMesh, fr: &Frame, w: usize, h: usize) -> Projected {
    let (xy, z) = mesh
        .vertices
        .iter()
        .map(|v| {
            let (x, y, z) = fr.project(v, w, h);
            ([x, y], z)
        })
        .unzip();
    Projected { xy, z }
}

fn face_visible(p: &Projected, f: &[u32; 3]) -> bool {
    f.iter().all(|&v| p.z[v as usize] > NEAR)
}

fn edge_fn(a: &[f64; 2], b: &[f64; 2], p: &[f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterize `mesh` from `cam`: nearest hit per pixel center, two-sided,
/// depth ties resolved toward the lowest triangle id.
pub fn rasterize(mesh: &SurfaceMesh, cam: &Camera) -> Result<GBuffer> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut gb = GBuffer::empty(w, h, mesh.faces.len());
    if mesh.faces.is_empty() {
        return Ok(gb);
    }
    let fr = cam.frame();
    let proj = project_mesh(mesh, &fr, w, h);

    // bin triangles into row bands
    let nbands = h.div_ceil(ROW_BAND);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); nbands];
    let mut rects = vec![[0usize; 4]; mesh.faces.len()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        if !face_visible(&proj, f) {
            continue;
        }
        let pts = f.map(|v| proj.xy[v as usize]);
        let area = edge_fn(&pts[0], &pts[1], &pts[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &pts {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        // pixel centers c with x0 <= c + 0.5 <= x1
        let cx0 = (x0 - 0.5).ceil().max(0.0);
        let cx1 = (x1 - 0.5).floor().min(w as f64 - 1.0);
        let cy0 = (y0 - 0.5).ceil().max(0.0);
        let cy1 = (y1 - 0.5).floor().min(h as f64 - 1.0);
        if cx0 > cx1 || cy0 > cy1 {
            continue;
        }
        let r = [cx0 as usize, cx1 as usize, cy0 as usize, cy1 as usize];
        rects[fi] = r;
        for bin in bins.iter_mut().take(r[3] / ROW_BAND + 1).skip(r[2] / ROW_BAND) {
            bin.push(fi as u32);
        }
    }

    let bands: Vec<_> = gb
        .triangle
        .par_chunks_mut(ROW_BAND * w)
        .zip(gb.bary.par_chunks_mut(ROW_BAND * w))
        .zip(gb.depth.par_chunks_mut(ROW_BAND * w))
        .zip(gb.position.par_chunks_mut(ROW_BAND * w))
        .zip(gb.ray_t.par_chunks_mut(ROW_BAND * w))
        .enumerate()
        .collect();
    bands.into_par_iter().for_each(|(band, ((((tri, bary), depth), pos), ray_t))| {
        let row0 = band * ROW_BAND;
        let row1 = (row0 + ROW_BAND).min(h);
        for &fi in &bins[band] {
            let f = mesh.faces[fi as usize];
            let r = rects[fi as usize];
            let pts = f.map(|v| proj.xy[v as usize]);
            let vs = f.map(|v| mesh.vertices[v as usize]);
            let area = edge_fn(&pts[0], &pts[1], &pts[2]);
            let sgn = area.signum();
            for y in r[2].max(row0)..=r[3].min(row1 - 1) {
                for x in r[0]..=r[1] {
                    let c = [x as f64 + 0.5, y as f64 + 0.5];
                    let w0 = sgn * edge_fn(&pts[1], &pts[2], &c);
                    let w1 = sgn * edge_fn(&pts[2], &pts[0], &c);
                    let w2 = sgn * edge_fn(&pts[0], &pts[1], &c);
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let d = fr.ray_dir(c[0], c[1], w, h);
                    let Some((t, b1, b2)) = intersect(&fr.eye, &d, &vs) else {
                        continue;
                    };
                    let local = (y - row0) * w + x;
                    if !(t > 0.0) || t >= ray_t[local] {
                        continue;
                    }
                    let mut b = [(1.0 - b1 - b2).max(0.0), b1.max(0.0), b2.max(0.0)];
                    let s: f64 = b.iter().sum();
                    if s <= 0.0 {
                        continue;
                    }
                    b.iter_mut().for_each(|v| *v /= s);
                    tri[local] = Some(fi);
                    bary[local] = b;
                    ray_t[local] = t;
                    depth[local] = t * d.dot(&fr.forward);
                    pos[local] = vs[0] * b[0] + vs[1] * b[1] + vs[2] * b[2];
                }
            }
        }
    });
    Ok(gb)
}

/// Shade covered pixels with `texture(world position)`, others with `background`.
pub fn shade_with_texture<F>(gbuf: &GBuffer, texture: F, background: [f64; 3]) -> Image
where
    F: Fn(&Vec3) -> [f64; 3] + Sync,
{
    let data: Vec<f64> = (0..gbuf.num_pixels())
        .into_par_iter()
        .flat_map_iter(|i| if gbuf.covered(i) { texture(&gbuf.position[i]) } else { background })
        .collect();
    Image {
        width: gbuf.width,
        height: gbuf.height,
        channels: 3,
        data,
    }
}

/// Edge adjacency of a mesh with silhouette classification for one camera.
struct Silhouette {
    /// For each face, which of its edges (v0v1, v1v2, v2v0) are silhouette edges.
    face_edges: Vec<[bool; 3]>,
}

fn silhouette(mesh: &SurfaceMesh, proj: &Projected) -> Silhouette {
    let mut adj: HashMap<[u32; 2], Vec<(u32, u32)>> = HashMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            adj.entry([a.min(b), a.max(b)]).or_default().push((fi as u32, f[(k + 2) % 3]));
        }
    }
    let face_edges = mesh
        .faces
        .iter()
        .map(|f| {
            [0, 1, 2].map(|k| {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let list = &adj[&[a.min(b), a.max(b)]];
                if list.len() != 2 {
                    return true;
                }
                let (pa, pb) = (proj.xy[a as usize], proj.xy[b as usize]);
                let s0 = edge_fn(&pa, &pb, &proj.xy[list[0].1 as usize]);
                let s1 = edge_fn(&pa, &pb, &proj.xy[list[1].1 as usize]);
                s0 * s1 > 0.0
            })
        })
        .collect();
    Silhouette { face_edges }
}

/// One pixel-pair blend: `out[dst] += weight * (img[src] - img[dst])`, with
/// `weight` depending on the edge endpoints `(va, vb)`.
#[derive(Debug, Clone, Copy)]
struct Blend {
    dst: u32,
    src: u32,
    weight: f64,
    /// d weight / d (xa, ya, xb, yb) in pixel coordinates.
    dweight: [f64; 4],
    va: u32,
    vb: u32,
}

/// Blends recorded by [`antialias`], needed by [`antialias_backward`].
#[derive(Debug, Clone)]
pub struct AaTrace {
    blends: Vec<Blend>,
    num_faces: usize,
    num_vertices: usize,
}

impl AaTrace {
    pub fn num_blends(&self) -> usize {
        self.blends.len()
    }
}

/// Crossing of edge `(a, b)` with the segment between pixel centers `cf`
/// (covered) and `co` along `axis`. Returns `(alpha, d alpha / d(ax, ay, bx, by))`.
fn pair_crossing(a: &[f64; 2], b: &[f64; 2], cf: &[f64; 2], co: &[f64; 2], axis: usize) -> Option<(f64, [f64; 4])> {
    let other = 1 - axis;
    let (d_ax, d_ot) = (b[axis] - a[axis], b[other] - a[other]);
    // dominant-axis rule: pairs along `axis` handle edges that run mostly along `other`
    if d_ot.abs() < d_ax.abs() || d_ot == 0.0 {
        return None;
    }
    let yc = cf[other];
    let u = (yc - a[other]) / d_ot;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let xe = a[axis] + u * d_ax;
    let dir = (co[axis] - cf[axis]).signum();
    let alpha = dir * (xe - cf[axis]);
    if !(0.0..=1.0).contains(&alpha) {
        return None;
    }
    // derivatives of xe w.r.t. a[axis], a[other], b[axis], b[other]
    let dxa = 1.0 - u;
    let dxb = u;
    let dya = d_ax * (u - 1.0) / d_ot;
    let dyb = -d_ax * u / d_ot;
    let mut g = [0.0; 4];
    g[axis] = dir * dxa;
    g[other] = dir * dya;
    g[2 + axis] = dir * dxb;
    g[2 + other] = dir * dyb;
    Some((alpha, g))
}

/// Silhouette antialiasing. For every horizontally or vertically adjacent pixel
/// pair where the nearer covering triangle has a silhouette edge crossing
/// between the two centers at fraction `alpha` from the covered center, the
/// uncovered side is blended toward the covered one by `alpha - 0.5` when
/// `alpha > 0.5`, otherwise the covered side is blended toward the other by
/// `0.5 - alpha`. Blends are computed from the input image and summed.
pub fn antialias(img: &Image, gbuf: &GBuffer, mesh: &SurfaceMesh, cam: &Camera) -> Result<(Image, AaTrace)> {
    gbuf.check_mesh(mesh, cam)?;
    ensure!(img.width == gbuf.width && img.height == gbuf.height, "image and G-buffer sizes differ");
    let (w, h) = (gbuf.width, gbuf.height);
    let mut trace = AaTrace {
        blends: Vec::new(),
        num_faces: mesh.faces.len(),
        num_vertices: mesh.vertices.len(),
    };
    if mesh.faces.is_empty() {
        return Ok((img.clone(), trace));
    }
    let fr = cam.frame();
    let proj = project_mesh(mesh, &fr, w, h);
    let sil = silhouette(mesh, &proj);

    let rows: Vec<Vec<Blend>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                let a = y * w + x;
                for (axis, nb) in [(0usize, (x + 1 < w).then(|| a + 1)), (1usize, (y + 1 < h).then(|| a + w))] {
                    let Some(b) = nb else { continue };
                    let (ta, tb) = (gbuf.triangle[a], gbuf.triangle[b]);
                    if ta == tb {
                        continue;
                    }
                    let (f_px, o_px, tf) = match (ta, tb) {
                        (Some(t), None) => (a, b, t),
                        (None, Some(t)) => (b, a, t),
                        (Some(t1), Some(t2)) => {
                            if gbuf.depth[a] <= gbuf.depth[b] {
                                (a, b, t1)
                            } else {
                                (b, a, t2)
                            }
                        }
                        (None, None) => continue,
                    };
                    let center = |p: usize| [(p % w) as f64 + 0.5, (p / w) as f64 + 0.5];
                    let (cf, co) = (center(f_px), center(o_px));
                    let f = mesh.faces[tf as usize];
                    for k in 0..3 {
                        if !sil.face_edges[tf as usize][k] {
                            continue;
                        }
                        let (va, vb) = (f[k], f[(k + 1) % 3]);
                        let Some((alpha, da)) = pair_crossing(&proj.xy[va as usize], &proj.xy[vb as usize], &cf, &co, axis) else {
                            continue;
                        };
                        let blend = if alpha > 0.5 {
                            Blend {
                                dst: o_px as u32,
                                src: f_px as u32,
                                weight: alpha - 0.5,
                                dweight: da,
                                va,
                                vb,
                            }
                        } else {
                            Blend {
                                dst: f_px as u32,
                                src: o_px as u32,
                                weight: 0.5 - alpha,
                                dweight: da.map(|v| -v),
                                va,
                                vb,
                            }
                        };
                        out.push(blend);
                        break;
                    }
                }
            }
            out
        })
        .collect();
    trace.blends = rows.into_iter().flatten().collect();

    let mut out = img.clone();
    let c = img.channels;
    for bl in &trace.blends {
        let (d, s) = (bl.dst as usize, bl.src as usize);
        for k in 0..c {
            out.data[d * c + k] += bl.weight * (img.data[s * c + k] - img.data[d * c + k]);
        }
    }
    Ok((out, trace))
}

/// Antialiased coverage of the hard G-buffer mask.
pub fn antialias_silhouette(gbuf: &GBuffer, mesh: &SurfaceMesh, cam: &Camera) -> Result<(Image, AaTrace)> {
    antialias(&gbuf.mask(), gbuf, mesh, cam)
}

/// Backward through [`antialias`]: returns `(d input image, d mesh vertices)`.
pub fn antialias_backward(trace: &AaTrace, img: &Image, mesh: &SurfaceMesh, cam: &Camera, d_out: &Image) -> Result<(Image, Vec<Vec3>)> {
    ensure!(
        trace.num_faces == mesh.faces.len() && trace.num_vertices == mesh.vertices.len(),
        "antialias trace does not belong to this mesh"
    );
    ensure!(img.same_shape(d_out), "upstream gradient shape does not match the image");
    let c = img.channels;
    let mut d_img = d_out.clone();
    let mut d_v = vec![Vec3::zeros(); mesh.vertices.len()];
    if trace.blends.is_empty() {
        return Ok((d_img, d_v));
    }
    let fr = cam.frame();
    let mut d_xy = vec![[0.0f64; 2]; mesh.vertices.len()];
    for bl in &trace.blends {
        let (d, s) = (bl.dst as usize, bl.src as usize);
        let mut dw = 0.0;
        for k in 0..c {
            let g = d_out.data[d * c + k];
            dw += g * (img.data[s * c + k] - img.data[d * c + k]);
            d_img.data[s * c + k] += bl.weight * g;
            d_img.data[d * c + k] -= bl.weight * g;
        }
        if dw != 0.0 {
            d_xy[bl.va as usize][0] += dw * bl.dweight[0];
            d_xy[bl.va as usize][1] += dw * bl.dweight[1];
            d_xy[bl.vb as usize][0] += dw * bl.dweight[2];
            d_xy[bl.vb as usize][1] += dw * bl.dweight[3];
        }
    }
    for (v, g) in d_xy.iter().enumerate() {
        if g[0] != 0.0 || g[1] != 0.0 {
            let (jx, jy) = fr.project_jacobian(&mesh.vertices[v], img.width, img.height);
            d_v[v] = jx * g[0] + jy * g[1];
        }
    }
    Ok((d_img, d_v))
}

/// Backward from per-pixel world-position gradients to mesh vertices, through
/// the ray/plane intersection that produced each covered pixel.
pub fn rasterize_backward(gbuf: &GBuffer, mesh: &SurfaceMesh, cam: &Camera, d_position: &[Vec3]) -> Result<Vec<Vec3>> {
    gbuf.check_mesh(mesh, cam)?;
    ensure!(d_position.len() == gbuf.num_pixels(), "position gradient has wrong length");
    let fr = cam.frame();
    let (w, h) = (gbuf.width, gbuf.height);
    let contrib: Vec<Option<(u32, [Vec3; 3])>> = (0..gbuf.num_pixels())
        .into_par_iter()
        .map(|i| {
            let t = gbuf.triangle[i]?;
            let g = d_position[i];
            if g == Vec3::zeros() {
                return None;
            }
            let f = mesh.faces[t as usize];
            let [v0, v1, v2] = f.map(|v| mesh.vertices[v as usize]);
            let d = fr.ray_dir((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, w, h);
            let e1 = v1 - v0;
            let e2 = v2 - v0;
            let n = e1.cross(&e2);
            let nd = n.dot(&d);
            if nd == 0.0 {
                return None;
            }
            let tt = n.dot(&(v0 - fr.eye)) / nd;
            let p = fr.eye + d * tt;
            let dt = g.dot(&d);
            let gn = (v0 - p) * (dt / nd);
            let dv1 = e2.cross(&gn);
            let dv2 = gn.cross(&e1);
            let dv0 = n * (dt / nd) - dv1 - dv2;
            Some((t, [dv0, dv1, dv2]))
        })
        .collect();
    let mut out = vec![Vec3::zeros(); mesh.vertices.len()];
    for (t, dv) in contrib.into_iter().flatten() {
        let f = mesh.faces[t as usize];
        for k in 0..3 {
            out[f[k] as usize] += dv[k];
        }
    }
    Ok(out)
}
