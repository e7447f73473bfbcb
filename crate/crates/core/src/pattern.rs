use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ShiftVector, TorusShift, Window};

/// A finite planar point pattern observed in a rectangular window,
/// optionally carrying one label per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    pub window: Window,
    pub points: Vec<[f64; 2]>,
    pub labels: Option<Vec<String>>,
}

impl PointPattern {
    pub fn new(window: Window, points: Vec<[f64; 2]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !window.contains(*p)) {
            return Err(Error::param(
                "points",
                format!("point {i} at {:?} lies outside the window", points[i]),
            ));
        }
        Ok(PointPattern {
            window,
            points,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::param("labels", "one label per point is required"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn empty(window: Window) -> Self {
        PointPattern {
            window,
            points: Vec::new(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity(&self) -> f64 {
        self.len() as f64 / self.window.area()
    }

    /// Points falling in `sub`, observed in `sub`.
    pub fn restrict(&self, sub: &Window) -> PointPattern {
        PointPattern {
            window: *sub,
            points: self.points.iter().copied().filter(|p| sub.contains(*p)).collect(),
            labels: None,
        }
    }

    /// Translates every point by `v` (no wrapping) and keeps those inside `sub`.
    pub fn shifted_into(&self, v: ShiftVector, sub: &Window) -> PointPattern {
        PointPattern {
            window: *sub,
            points: self
                .points
                .iter()
                .map(|p| v.apply(*p))
                .filter(|p| sub.contains(*p))
                .collect(),
            labels: None,
        }
    }

    /// Translates the pattern and its window together.
    pub fn translated(&self, v: ShiftVector) -> PointPattern {
        PointPattern {
            window: self.window.translate(v),
            points: self.points.iter().map(|p| v.apply(*p)).collect(),
            labels: self.labels.clone(),
        }
    }
}

impl TorusShift for PointPattern {
    fn torus_shift(&self, v: ShiftVector, w: &Window) -> Result<Self> {
        if self.window != *w {
            return Err(Error::UnsupportedGeometry(
                "torus shift requires the pattern's own rectangular window".into(),
            ));
        }
        Ok(PointPattern {
            window: *w,
            points: self.points.iter().map(|p| w.wrap(v.apply(*p))).collect(),
            labels: self.labels.clone(),
        })
    }
}
