use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented box. `size` is `(w, l, h)`: `l` runs along the heading (local +x),
/// `w` along local +y, `h` along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Input(format!("box size {size:?} must be strictly positive")));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn frame(&self) -> Frame2 {
        Frame2 {
            origin: self.center,
            yaw: self.yaw,
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.frame().to_local(p);
        l[0].abs() <= self.length() / 2.0 && l[1].abs() <= self.width() / 2.0 && l[2].abs() <= self.height() / 2.0
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let (s, c) = self.yaw.sin_cos();
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        })
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

/// Rigid yaw-only frame: local coordinates are world coordinates translated
/// to `origin` and rotated by −`yaw` about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame2 {
    pub origin: Point3,
    pub yaw: f64,
}

impl Frame2 {
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.origin[0] + c * p[0] - s * p[1],
            self.origin[1] + s * p[0] + c * p[1],
            self.origin[2] + p[2],
        ]
    }

    pub fn box_to_local(&self, b: &Box3D) -> Box3D {
        Box3D {
            center: self.to_local(&b.center),
            size: b.size,
            yaw: wrap_angle(b.yaw - self.yaw),
        }
    }

    pub fn box_to_world(&self, b: &Box3D) -> Box3D {
        Box3D {
            center: self.to_world(&b.center),
            size: b.size,
            yaw: wrap_angle(b.yaw + self.yaw),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input(format!("non-finite point {p:?}")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_inside(&self, b: &Box3D) -> usize {
        self.points.iter().filter(|p| b.contains(p)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt_box: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub object_size: [f64; 3],
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn gt_boxes(&self) -> Vec<Box3D> {
        self.frames.iter().map(|f| f.gt_box).collect()
    }
}
