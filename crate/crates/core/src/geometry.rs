//! Rectangular-window geometry: shift vectors, toroidal wrapping, erosion,
//! window intersections and the set-covariance quantities behind the
//! globally corrected cross-K estimator.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simpson intervals per smooth piece of an angular average over `[0, π/2]`.
pub const ANGULAR_NODES: usize = 256;

/// Shifts whose window intersection keeps less than this fraction of `|W|`
/// are redrawn by the test engine.
pub const MIN_INTERSECTION_FRACTION: f64 = 0.01;

/// Axis-aligned rectangular observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(Error::param(
                "window",
                format!("[{x_min}, {x_max}] x [{y_min}, {y_max}] has no positive area"),
            ));
        }
        Ok(Window {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// The unit square `[0, 1]²`.
    pub fn unit() -> Self {
        Window {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    /// Closed-rectangle membership.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Distance from an interior point to the window boundary.
    pub fn border_distance(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.x_min)
            .min(self.x_max - p[0])
            .min(p[1] - self.y_min)
            .min(self.y_max - p[1])
    }

    pub fn translate(&self, v: ShiftVector) -> Window {
        Window {
            x_min: self.x_min + v.dx,
            y_min: self.y_min + v.dy,
            x_max: self.x_max + v.dx,
            y_max: self.y_max + v.dy,
        }
    }

    /// Intersection with another window, `None` when it has no area.
    pub fn intersect(&self, other: &Window) -> Option<Window> {
        let w = Window {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (w.x_max > w.x_min && w.y_max > w.y_min).then_some(w)
    }

    /// Wraps a location into `[x_min, x_max) × [y_min, y_max)`.
    pub fn wrap(&self, p: [f64; 2]) -> [f64; 2] {
        [
            wrap_coord(p[0], self.x_min, self.width()),
            wrap_coord(p[1], self.y_min, self.height()),
        ]
    }
}

fn wrap_coord(x: f64, lo: f64, side: f64) -> f64 {
    let w = (x - lo).rem_euclid(side);
    // rem_euclid can round up to `side` for tiny negative inputs
    if w >= side {
        lo
    } else {
        lo + w
    }
}

/// A translation vector. The zero vector plays the role of the unshifted data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftVector {
    pub dx: f64,
    pub dy: f64,
}

impl ShiftVector {
    pub const ORIGIN: ShiftVector = ShiftVector { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        ShiftVector { dx, dy }
    }

    pub fn is_origin(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn neg(&self) -> Self {
        ShiftVector::new(-self.dx, -self.dy)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.dx, p[1] + self.dy]
    }

    pub fn distance(&self, other: &ShiftVector) -> f64 {
        (self.dx - other.dx).hypot(self.dy - other.dy)
    }
}

/// Draws a shift uniformly from the closed disk of the given radius.
pub fn draw_shift_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Result<ShiftVector> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param("radius", format!("{radius} is not positive")));
    }
    let rho = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    Ok(ShiftVector::new(rho * theta.cos(), rho * theta.sin()))
}

/// Draws a shift uniformly from the square `[-h, h]²`.
pub fn draw_shift_rect<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> Result<ShiftVector> {
    draw_shift_box(rng, half_width, half_width)
}

/// Draws a shift uniformly from `[-hx, hx] × [-hy, hy]`.
pub fn draw_shift_box<R: Rng + ?Sized>(rng: &mut R, hx: f64, hy: f64) -> Result<ShiftVector> {
    for (name, h) in [("half_width", hx), ("half_height", hy)] {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::param(name, format!("{h} is not positive")));
        }
    }
    Ok(ShiftVector::new(
        rng.random_range(-hx..=hx),
        rng.random_range(-hy..=hy),
    ))
}

/// Distribution of the random shift vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ShiftLaw {
    Disk { radius: f64 },
    Rect { half_x: f64, half_y: f64 },
}

impl ShiftLaw {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ShiftVector> {
        match *self {
            ShiftLaw::Disk { radius } => draw_shift_disk(rng, radius),
            ShiftLaw::Rect { half_x, half_y } => draw_shift_box(rng, half_x, half_y),
        }
    }

    /// Largest absolute coordinate a draw can have, per axis.
    pub fn extent(&self) -> (f64, f64) {
        match *self {
            ShiftLaw::Disk { radius } => (radius, radius),
            ShiftLaw::Rect { half_x, half_y } => (half_x, half_y),
        }
    }

    /// Smallest window dimensions `(w, h)` an intersection `W ∩ (W + v)` can have.
    pub fn min_intersection_dims(&self, w: &Window) -> (f64, f64) {
        let (ex, ey) = self.extent();
        ((w.width() - ex).max(0.0), (w.height() - ey).max(0.0))
    }
}

/// Objects that can be translated on the torus obtained by identifying
/// opposite edges of a rectangular window.
pub trait TorusShift: Sized {
    fn torus_shift(&self, v: ShiftVector, w: &Window) -> Result<Self>;
}

/// Maps a single location `x` to `((x − W_min + v) mod sides) + W_min`.
pub fn torus_shift_point(p: [f64; 2], v: ShiftVector, w: &Window) -> [f64; 2] {
    w.wrap(v.apply(p))
}

/// Centered erosion of `w` by the given margins.
pub fn erode(w: &Window, margin_x: f64, margin_y: f64) -> Result<Window> {
    if !(margin_x >= 0.0 && margin_y >= 0.0) {
        return Err(Error::param("margin", "erosion margins must be non-negative"));
    }
    if 2.0 * margin_x >= w.width() || 2.0 * margin_y >= w.height() {
        return Err(Error::EmptyWindow { margin_x, margin_y });
    }
    Ok(Window {
        x_min: w.x_min + margin_x,
        y_min: w.y_min + margin_y,
        x_max: w.x_max - margin_x,
        y_max: w.y_max - margin_y,
    })
}

/// The window `W_i = W ∩ (W + v_i)` on which shifted data are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedDomain {
    pub base: Window,
    pub shift: ShiftVector,
    pub window: Window,
    pub area: f64,
}

pub fn intersect_shifted(w: &Window, v: ShiftVector, index: usize) -> Result<ShiftedDomain> {
    if v.is_origin() {
        return Ok(ShiftedDomain {
            base: *w,
            shift: v,
            window: *w,
            area: w.area(),
        });
    }
    let (a, b) = (w.width(), w.height());
    if v.dx.abs() >= a || v.dy.abs() >= b {
        return Err(Error::EmptyIntersection { index });
    }
    let window = Window {
        x_min: w.x_min + v.dx.max(0.0),
        y_min: w.y_min + v.dy.max(0.0),
        x_max: w.x_max + v.dx.min(0.0),
        y_max: w.y_max + v.dy.min(0.0),
    };
    Ok(ShiftedDomain {
        base: *w,
        shift: v,
        window,
        area: (a - v.dx.abs()) * (b - v.dy.abs()),
    })
}

fn rect_overlap(a: f64, b: f64, hx: f64, hy: f64) -> f64 {
    (a - hx.abs()).max(0.0) * (b - hy.abs()).max(0.0)
}

/// Isotropized set covariance `γ̄_W(t)`: the overlap area `|W ∩ (W + t·u)|`
/// averaged over unit directions `u`.
pub fn set_covariance_gamma(w: &Window, t: f64) -> f64 {
    let (a, b) = (w.width(), w.height());
    if t <= 0.0 {
        return a * b;
    }
    if t >= w.diameter() {
        return 0.0;
    }
    let f = |theta: f64| rect_overlap(a, b, t * theta.cos(), t * theta.sin());
    angular_mean(f, &kinks(a, b, t))
}

/// `Γ_W(r) = ∫_W ∫_W 𝕀(‖x − y‖ ≤ r) dx dy`.
///
/// For `r` up to the shorter side the polar integral of the rectangle set
/// covariance is a polynomial. Beyond that the radial integral is still
/// done exactly, per direction, and the angular one by Simpson pieces split
/// at the kinks.
pub fn big_gamma(w: &Window, r: f64) -> f64 {
    let (a, b) = (w.width(), w.height());
    if r <= 0.0 {
        return 0.0;
    }
    if r <= a.min(b) {
        return PI * a * b * r * r - 4.0 / 3.0 * (a + b) * r.powi(3) + 0.5 * r.powi(4);
    }
    if r >= w.diameter() {
        return (a * b).powi(2);
    }
    let radial = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let mut t = r;
        if c > 0.0 {
            t = t.min(a / c);
        }
        if s > 0.0 {
            t = t.min(b / s);
        }
        a * b * t * t / 2.0 - (a * s + b * c) * t.powi(3) / 3.0 + c * s * t.powi(4) / 4.0
    };
    2.0 * PI * angular_mean(radial, &kinks(a, b, r))
}

/// Angles in `(0, π/2)` where the overlap of a rectangle with its
/// translate by `t` along the angle stops being smooth.
fn kinks(a: f64, b: f64, t: f64) -> Vec<f64> {
    let mut k = vec![b.atan2(a)];
    if t > a {
        k.push((a / t).acos());
    }
    if t > b {
        k.push((b / t).asin());
    }
    k
}

/// Mean of `f` over `[0, π/2]` by composite Simpson on the pieces between
/// the given breakpoints, so that kinks fall on piece boundaries.
fn angular_mean(f: impl Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let mut edges: Vec<f64> = std::iter::once(0.0)
        .chain(breaks.iter().copied().filter(|&x| x > 0.0 && x < FRAC_PI_2))
        .chain(std::iter::once(FRAC_PI_2))
        .collect();
    edges.sort_by(f64::total_cmp);
    let n = ANGULAR_NODES;
    let mut total = 0.0;
    for e in edges.windows(2) {
        let h = (e[1] - e[0]) / n as f64;
        if h <= 0.0 {
            continue;
        }
        let mut s = f(e[0]) + f(e[1]);
        for i in 1..n {
            s += f(e[0] + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += s * h / 3.0;
    }
    total / FRAC_PI_2
}

/// Area of the disc of radius `r` centred at `p ∈ W` that lies inside `W`.
/// Exact by inclusion–exclusion over the half-planes beyond each edge:
/// opposite half-planes are disjoint, so only edge caps and corner pieces
/// appear.
pub fn disc_window_area(w: &Window, p: [f64; 2], r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let r2 = r * r;
    let d = [p[0] - w.x_min, w.x_max - p[0], p[1] - w.y_min, w.y_max - p[1]];
    let cap = |h: f64| if h >= r { 0.0 } else { r2 * (h / r).acos() - h * (r2 - h * h).sqrt() };
    // part of the disc beyond two perpendicular edges at distances h, k
    let corner = |h: f64, k: f64| {
        if h * h + k * k >= r2 {
            return 0.0;
        }
        let f = |u: f64| 0.5 * (u * (r2 - u * u).max(0.0).sqrt() + r2 * (u / r).clamp(-1.0, 1.0).asin());
        let u1 = (r2 - k * k).sqrt();
        f(u1) - f(h) - k * (u1 - h)
    };
    let mut area = PI * r2 - d.iter().map(|&h| cap(h)).sum::<f64>();
    for &h in &d[..2] {
        for &k in &d[2..] {
            area += corner(h, k);
        }
    }
    area
}

/// Edge-correction factor `c(r) = πr² / Γ_W(r)`.
pub fn edge_factor_c(w: &Window, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::param("r", "edge factor is undefined at r = 0"));
    }
    Ok(PI * r * r / big_gamma(w, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn disk_draws_stay_in_support() {
        let mut rng = rng_from_seed(1);
        for _ in 0..10_000 {
            assert!(draw_shift_disk(&mut rng, 0.5).unwrap().norm() <= 0.5);
        }
        assert!(draw_shift_disk(&mut rng, 0.0).is_err());
        assert!(draw_shift_disk(&mut rng, -1.0).is_err());
    }

    #[test]
    fn disk_draws_have_uniform_moments() {
        let mut rng = rng_from_seed(2);
        let n = 100_000;
        let (mut sx, mut sy, mut inner) = (0.0, 0.0, 0usize);
        for _ in 0..n {
            let v = draw_shift_disk(&mut rng, 0.5).unwrap();
            sx += v.dx;
            sy += v.dy;
            if v.norm() <= 0.25 {
                inner += 1;
            }
        }
        // coordinate sd of a uniform disk of radius R is R/2
        let se = 0.25 / (n as f64).sqrt();
        assert!((sx / n as f64).abs() < 3.0 * se);
        assert!((sy / n as f64).abs() < 3.0 * se);
        let frac = inner as f64 / n as f64;
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((frac - 0.25).abs() < 3.0 * se, "{frac}");
    }

    #[test]
    fn rect_draws() {
        let mut rng = rng_from_seed(3);
        let h = 1.0 / 3.0;
        let n = 100_000;
        let mut s2 = 0.0;
        for _ in 0..n {
            let v = draw_shift_rect(&mut rng, h).unwrap();
            assert!(v.dx.abs() <= h && v.dy.abs() <= h);
            s2 += v.dx * v.dx;
        }
        let var = s2 / n as f64;
        // var of U(-h,h)^2 moment: E x^4 - (E x^2)^2 = h^4/5 - h^4/9
        let se = ((h.powi(4) / 5.0 - h.powi(4) / 9.0) / n as f64).sqrt();
        assert!((var - h * h / 3.0).abs() < 3.0 * se, "{var}");
        assert!(draw_shift_rect(&mut rng, 0.0).is_err());
    }

    #[test]
    fn torus_point_examples() {
        let w = Window::unit();
        let p = torus_shift_point([0.9, 0.5], ShiftVector::new(0.2, 0.0), &w);
        assert!((p[0] - 0.1).abs() < 1e-12 && p[1] == 0.5);
        assert_eq!(torus_shift_point([0.3, 0.7], ShiftVector::ORIGIN, &w), [0.3, 0.7]);
        let p = torus_shift_point([0.3, 0.7], ShiftVector::new(1.0, 0.0), &w);
        assert!((p[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn erosion() {
        let w = Window::unit();
        let c = erode(&w, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        assert!((c.x_min - 1.0 / 3.0).abs() < 1e-15 && (c.x_max - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(erode(&w, 0.0, 0.0).unwrap(), w);
        assert!(matches!(erode(&w, 0.6, 0.6), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn intersections() {
        let w = Window::unit();
        let d = intersect_shifted(&w, ShiftVector::new(0.3, 0.0), 1).unwrap();
        assert!((d.area - 0.7).abs() < 1e-15);
        let d = intersect_shifted(&w, ShiftVector::ORIGIN, 0).unwrap();
        assert_eq!(d.window, w);
        assert_eq!(d.area, 1.0);
        let d = intersect_shifted(&w, ShiftVector::new(0.3, 0.4), 2).unwrap();
        assert!((d.area - 0.42).abs() < 1e-15);
        assert!(matches!(
            intersect_shifted(&w, ShiftVector::new(1.0, 0.0), 5),
            Err(Error::EmptyIntersection { index: 5 })
        ));
    }

    #[test]
    fn set_covariance_limits() {
        let w = Window::unit();
        assert_eq!(set_covariance_gamma(&w, 0.0), 1.0);
        assert_eq!(set_covariance_gamma(&w, 2.0), 0.0);
        // closed form for t <= min side: ab - 2t(a+b)/π + t²/π
        for t in [0.05, 0.3, 0.9] {
            let exact = 1.0 - 4.0 * t / PI + t * t / PI;
            assert!((set_covariance_gamma(&w, t) - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn big_gamma_limits_and_continuity() {
        let w = Window::new(0.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(big_gamma(&w, 0.0), 0.0);
        assert!((big_gamma(&w, 10.0) - 0.25).abs() < 1e-15);
        // the polynomial and the angular rule agree where both apply
        let r = 0.5;
        let poly = big_gamma(&w, r);
        let just_above = big_gamma(&w, r + 1e-9);
        assert!((poly - just_above).abs() < 1e-6, "{poly} {just_above}");
        let near_diag = big_gamma(&w, w.diameter() - 1e-9);
        assert!((near_diag - 0.25).abs() < 1e-6);
    }

    #[test]
    fn disc_window_area_matches_grid_count() {
        let w = Window::new(0.0, 0.0, 1.0, 0.6).unwrap();
        let n = 1200;
        for (p, r) in [([0.5, 0.3], 0.1), ([0.02, 0.03], 0.1), ([0.1, 0.3], 0.45), ([0.5, 0.3], 0.7), ([0.9, 0.55], 2.0)] {
            let h = 2.0 * r / n as f64;
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let q = [p[0] - r + (i as f64 + 0.5) * h, p[1] - r + (j as f64 + 0.5) * h];
                    if w.contains(q) && (q[0] - p[0]).hypot(q[1] - p[1]) <= r {
                        count += 1;
                    }
                }
            }
            let grid = count as f64 * h * h;
            let exact = disc_window_area(&w, p, r);
            assert!((grid - exact).abs() < 3e-3 * r * r + 1e-6, "{p:?} {r}: {grid} vs {exact}");
        }
        assert!((disc_window_area(&w, [0.5, 0.3], 5.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn disc_area_integrates_to_big_gamma() {
        let w = Window::new(0.0, 0.0, 1.0, 0.7).unwrap();
        let n = 400;
        for r in [0.05, 0.2, 0.6] {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let p = [(i as f64 + 0.5) / n as f64, 0.7 * (j as f64 + 0.5) / n as f64];
                    s += disc_window_area(&w, p, r);
                }
            }
            let integral = s * 0.7 / (n * n) as f64;
            let g = big_gamma(&w, r);
            assert!((integral - g).abs() < 1e-4 * g, "{r}: {integral} vs {g}");
        }
    }

    #[test]
    fn edge_factor_small_r() {
        let w = Window::unit();
        assert!((edge_factor_c(&w, 1e-6).unwrap() - 1.0).abs() < 1e-5);
        assert!(edge_factor_c(&w, 0.0).is_err());
        for r in [0.05, 0.5, 1.0, 2.0] {
            assert!(edge_factor_c(&w, r).unwrap() >= PI * r * r - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn torus_shift_is_invertible(x in 0.0f64..1.0, y in 0.0f64..1.0,
                                     dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
            let w = Window::unit();
            let v = ShiftVector::new(dx, dy);
            let p = torus_shift_point([x, y], v, &w);
            prop_assert!(p[0] >= 0.0 && p[0] < 1.0 && p[1] >= 0.0 && p[1] < 1.0);
            let back = torus_shift_point(p, v.neg(), &w);
            prop_assert!((back[0] - x).abs() < 1e-12 || (back[0] - x).abs() > 1.0 - 1e-12);
            prop_assert!((back[1] - y).abs() < 1e-12 || (back[1] - y).abs() > 1.0 - 1e-12);
        }

        #[test]
        fn intersection_area_is_exact(dx in -0.999f64..0.999, dy in -0.999f64..0.999) {
            let w = Window::new(0.0, 0.0, 1.0, 1.0).unwrap();
            let d = intersect_shifted(&w, ShiftVector::new(dx, dy), 1).unwrap();
            prop_assert_eq!(d.area, (1.0 - dx.abs()) * (1.0 - dy.abs()));
            prop_assert!((d.window.area() - d.area).abs() < 1e-12);
        }

        #[test]
        fn minus_containment(x in 0.0f64..1.0, y in 0.0f64..1.0,
                             dx in -1.0f64/3.0..1.0/3.0, dy in -1.0f64/3.0..1.0/3.0) {
            let w = Window::unit();
            let c = erode(&w, 1.0 / 3.0, 1.0 / 3.0).unwrap();
            let p = [c.x_min + x * c.width(), c.y_min + y * c.height()];
            let q = ShiftVector::new(dx, dy).neg().apply(p);
            prop_assert!(w.contains(q));
        }

        #[test]
        fn gamma_monotone(t1 in 0.0f64..1.5, t2 in 0.0f64..1.5) {
            let w = Window::unit();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(set_covariance_gamma(&w, hi) <= set_covariance_gamma(&w, lo) + 1e-12);
            prop_assert!(big_gamma(&w, hi) >= big_gamma(&w, lo) - 1e-12);
        }
    }
}
