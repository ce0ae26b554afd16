//! Analytic signed distance functions used for targets, tests and the CLI.

use crate::math::Vec3;

pub fn sphere_sdf(p: &Vec3, radius: f64) -> f64 {
    p.norm() - radius
}

/// Torus around the y axis with ring radius `major` and tube radius `minor`.
pub fn torus_sdf(p: &Vec3, major: f64, minor: f64) -> f64 {
    let q = (p.x * p.x + p.z * p.z).sqrt() - major;
    (q * q + p.y * p.y).sqrt() - minor
}

/// Named analytic shapes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnalyticShape {
    Sphere { radius: f64 },
    Torus { major: f64, minor: f64 },
}

impl AnalyticShape {
    pub fn sphere() -> Self {
        AnalyticShape::Sphere { radius: 0.5 }
    }

    pub fn torus() -> Self {
        AnalyticShape::Torus { major: 0.5, minor: 0.2 }
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        match *self {
            AnalyticShape::Sphere { radius } => sphere_sdf(p, radius),
            AnalyticShape::Torus { major, minor } => torus_sdf(p, major, minor),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Self::sphere()),
            "torus" => Some(Self::torus()),
            _ => None,
        }
    }
}
