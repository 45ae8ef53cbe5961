//! 2D world geometry: anchors, regions of interest, location grids and
//! off-grid offsets.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
    pub fn norm2(self) -> f64 {
        self.x * self.x + self.y * self.y
    }
    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle given by its center and extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: Point,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn x_min(&self) -> f64 {
        self.center.x - self.width / 2.0
    }
    pub fn y_min(&self) -> f64 {
        self.center.y - self.height / 2.0
    }
    pub fn x_max(&self) -> f64 {
        self.center.x + self.width / 2.0
    }
    pub fn y_max(&self) -> f64 {
        self.center.y + self.height / 2.0
    }
    pub fn contains(&self, p: Point) -> bool {
        let eps = 1e-9 * (1.0 + self.width.max(self.height));
        p.x >= self.x_min() - eps && p.x <= self.x_max() + eps && p.y >= self.y_min() - eps && p.y <= self.y_max() + eps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub p_b: Point,
    pub p_i: Point,
    pub p_c: Point,
    /// BS array orientation (rad from +x).
    pub theta_b: f64,
    /// IRS array orientation (rad from +x).
    pub theta_i: f64,
    pub soi_r: Rect,
    pub soi_ru: Rect,
    pub wavelength: f64,
    /// Noise power in watts.
    pub noise_power: f64,
}

pub const CARRIER_28GHZ: f64 = 28e9;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            p_b: Point::new(-22.5, 0.4),
            p_i: Point::new(22.5, 0.4),
            p_c: Point::new(22.6, 0.5),
            theta_b: 0.0,
            theta_i: 0.0,
            soi_r: Rect { center: Point::new(0.0, 37.0), width: 40.0, height: 40.0 },
            soi_ru: Rect { center: Point::new(0.0, 8.5), width: 15.0, height: 15.0 },
            wavelength: SPEED_OF_LIGHT / CARRIER_28GHZ,
            noise_power: dbm_to_watts(-100.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0) {
            return Err(Error::Config("wavelength must be positive".into()));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config("noise power must be positive".into()));
        }
        for r in [&self.soi_r, &self.soi_ru] {
            if !(r.width > 0.0 && r.height > 0.0) {
                return Err(Error::Config("SOI extents must be positive".into()));
            }
        }
        let (r, ru) = (&self.soi_r, &self.soi_ru);
        let inside = r.contains(Point::new(ru.x_min(), ru.y_min())) && r.contains(Point::new(ru.x_max(), ru.y_max()));
        let below = ru.y_max() <= r.y_min() + 1e-9;
        if !inside && !below {
            return Err(Error::Config("user SOI must lie inside or below the sensing SOI".into()));
        }
        Ok(())
    }

    pub fn theta_irs(&self, p: Point) -> Result<f64> {
        angle_to(self.p_i, self.theta_i, p, Convention::Irs)
    }

    pub fn theta_bs(&self, p: Point) -> Result<f64> {
        angle_to(self.p_b, self.theta_b, p, Convention::Bs)
    }

    /// (∂θ/∂x, ∂θ/∂y) of the IRS-side angle at `p`.
    pub fn dtheta_irs(&self, p: Point) -> (f64, f64) {
        angle_partials(self.p_i, p)
    }

    pub fn dtheta_bs(&self, p: Point) -> (f64, f64) {
        angle_partials(self.p_b, p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    Irs,
    Bs,
}

pub fn angle_to(anchor: Point, orientation: f64, p: Point, convention: Convention) -> Result<f64> {
    let d = p - anchor;
    if d.x == 0.0 && d.y == 0.0 {
        return Err(Error::Domain("angle between coincident points".into()));
    }
    let base = d.y.atan2(d.x);
    Ok(match convention {
        Convention::Irs => base - PI - orientation,
        Convention::Bs => base + orientation,
    })
}

/// Both angle conventions differ from atan2 by a constant, so they share partials.
fn angle_partials(anchor: Point, p: Point) -> (f64, f64) {
    let d = p - anchor;
    let n2 = d.norm2();
    (-d.y / n2, d.x / n2)
}

/// Uniform lattice, stored column-major: index = col * rows + row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub points: Vec<Point>,
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn index(&self, col: usize, row: usize) -> usize {
        col * self.rows + row
    }
    pub fn col_row(&self, q: usize) -> (usize, usize) {
        (q / self.rows, q % self.rows)
    }

    /// Nearest lattice point; ties break toward the lower index.
    pub fn nearest(&self, p: Point) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, g) in self.points.iter().enumerate() {
            let d = g.dist(p);
            if d < bd - 1e-12 {
                bd = d;
                best = i;
            }
        }
        best
    }

    pub fn diagonal(&self) -> f64 {
        self.spacing * std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r: Lattice,
    pub z: Lattice,
}

impl GridSpec {
    pub fn q(&self) -> usize {
        self.r.len()
    }
    pub fn p(&self) -> usize {
        self.z.len()
    }
    /// Column stride used for MRF neighbours.
    pub fn grid_cols_y(&self) -> usize {
        self.r.rows
    }
}

fn lattice(soi: &Rect, n: usize) -> Result<Lattice> {
    if n == 0 {
        return Err(Error::Config("grid needs at least one point".into()));
    }
    let aspect = soi.width / soi.height;
    let mut found = None;
    for cols in 1..=n {
        if n % cols != 0 {
            continue;
        }
        let rows = n / cols;
        if ((cols as f64 / rows as f64) - aspect).abs() < 1e-9 * aspect.max(1.0) {
            found = Some((cols, rows));
            break;
        }
    }
    let (cols, rows) = found.ok_or_else(|| {
        Error::Config(format!("{n} grid points cannot tile a {}x{} m region uniformly", soi.width, soi.height))
    })?;
    let spacing = soi.width / cols as f64;
    let mut points = Vec::with_capacity(n);
    for c in 0..cols {
        for r in 0..rows {
            points.push(Point::new(
                soi.x_min() + (c as f64 + 0.5) * spacing,
                soi.y_min() + (r as f64 + 0.5) * spacing,
            ));
        }
    }
    Ok(Lattice { points, rows, cols, spacing })
}

pub fn build_grids(soi_r: &Rect, soi_ru: &Rect, q: usize, p: usize) -> Result<GridSpec> {
    Ok(GridSpec { r: lattice(soi_r, q)?, z: lattice(soi_ru, p)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub targets: Vec<Point>,
    pub scatterers: Vec<Point>,
    pub user: Point,
    /// (target index, scatterer index) pairs that are the same physical object.
    pub overlap: Vec<(usize, usize)>,
    /// Radar cross section per target (m²).
    pub rcs: Vec<f64>,
}

impl GroundTruth {
    pub fn overlap_count(&self) -> usize {
        self.overlap.len()
    }
    pub fn k(&self) -> usize {
        self.targets.len()
    }
    pub fn l(&self) -> usize {
        self.scatterers.len()
    }
    pub fn is_overlap_scatterer(&self, l: usize) -> Option<usize> {
        self.overlap.iter().find(|&&(_, s)| s == l).map(|&(t, _)| t)
    }
    pub fn is_overlap_target(&self, k: usize) -> Option<usize> {
        self.overlap.iter().find(|&&(t, _)| t == k).map(|&(_, s)| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetState {
    pub dr: Vec<Point>,
    pub dz: Vec<Point>,
}

impl OffsetState {
    pub fn zeros(q: usize, p: usize) -> Self {
        OffsetState { dr: vec![Point::default(); q], dz: vec![Point::default(); p] }
    }

    pub fn clamp(&mut self, grids: &GridSpec) {
        let hr = grids.r.spacing / 2.0;
        let hz = grids.z.spacing / 2.0;
        for d in &mut self.dr {
            d.x = d.x.clamp(-hr, hr);
            d.y = d.y.clamp(-hr, hr);
        }
        for d in &mut self.dz {
            d.x = d.x.clamp(-hz, hz);
            d.y = d.y.clamp(-hz, hz);
        }
    }

    pub fn r_pos(&self, grids: &GridSpec, q: usize) -> Point {
        grids.r.points[q] + self.dr[q]
    }

    pub fn z_pos(&self, grids: &GridSpec, p: usize) -> Point {
        grids.z.points[p] + self.dz[p]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub targets: Vec<usize>,
    pub scatterers: Vec<usize>,
    pub user: usize,
}

pub fn assign_offsets(truth: &GroundTruth, grids: &GridSpec) -> Result<(OffsetState, IndexMap)> {
    let mut off = OffsetState::zeros(grids.q(), grids.p());
    let mut owner: Vec<Option<Point>> = vec![None; grids.q()];
    let mut claim = |q: usize, p: Point, what: &str| -> Result<()> {
        match owner[q] {
            Some(prev) if prev != p => Err(Error::SceneGeneration(format!("{what} shares nearest grid {q} with another object"))),
            _ => {
                owner[q] = Some(p);
                Ok(())
            }
        }
    };
    let mut targets = Vec::with_capacity(truth.k());
    for &p in &truth.targets {
        let q = grids.r.nearest(p);
        claim(q, p, "target")?;
        off.dr[q] = p - grids.r.points[q];
        targets.push(q);
    }
    let mut scatterers = Vec::with_capacity(truth.l());
    for (l, &p) in truth.scatterers.iter().enumerate() {
        let q = grids.r.nearest(p);
        match truth.is_overlap_scatterer(l) {
            Some(k) if targets[k] == q => {}
            _ => claim(q, p, "scatterer")?,
        }
        off.dr[q] = p - grids.r.points[q];
        scatterers.push(q);
    }
    let user = grids.z.nearest(truth.user);
    off.dz[user] = truth.user - grids.z.points[user];
    Ok((off, IndexMap { targets, scatterers, user }))
}

/// Number and layout of objects drawn by the scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneContent {
    /// Block targets; each covers two vertically adjacent grids.
    pub k_blocks: usize,
    /// Block scatterers; each covers two vertically adjacent grids.
    pub l_blocks: usize,
    /// Individual objects that are both a target and a scatterer.
    pub overlap: usize,
    /// Off-grid displacement drawn uniformly in ±fraction·spacing/2 per axis.
    pub offset_fraction: f64,
    pub rcs: f64,
}

impl Default for SceneContent {
    fn default() -> Self {
        SceneContent { k_blocks: 1, l_blocks: 2, overlap: 1, offset_fraction: 0.8, rcs: 1.0 }
    }
}

impl SceneContent {
    pub fn k(&self) -> usize {
        2 * self.k_blocks
    }
    pub fn l(&self) -> usize {
        2 * self.l_blocks
    }
    /// γ_o = O / (K + L − O).
    pub fn overlap_ratio(&self) -> f64 {
        self.overlap as f64 / (self.k() + self.l() - self.overlap) as f64
    }
    /// Closest integer overlap count for a requested ratio at fixed K and L.
    pub fn overlap_for_ratio(k: usize, l: usize, gamma: f64) -> usize {
        let o = gamma * (k + l) as f64 / (1.0 + gamma);
        (o.round() as usize).min(k.min(l))
    }
}

pub const MAX_SCENE_ATTEMPTS: usize = 100;

/// Draws block targets/scatterers with the requested overlap and a user.
pub fn generate_truth<R: Rng + ?Sized>(grids: &GridSpec, content: &SceneContent, rng: &mut R) -> Result<GroundTruth> {
    let full = content.overlap / 2;
    let partial = content.overlap % 2;
    if full + partial > content.k_blocks.min(content.l_blocks) {
        return Err(Error::Config(format!(
            "overlap {} not realizable with {} target and {} scatterer blocks",
            content.overlap, content.k_blocks, content.l_blocks
        )));
    }
    if grids.r.rows < 3 && partial > 0 {
        return Err(Error::Config("partial block overlap needs at least 3 grid rows".into()));
    }
    let mut last = String::new();
    for _ in 0..MAX_SCENE_ATTEMPTS {
        match try_generate(grids, content, full, partial, rng) {
            Ok(t) => match assign_offsets(&t, grids) {
                Ok(_) => return Ok(t),
                Err(e) => last = e.to_string(),
            },
            Err(e) => last = e,
        }
    }
    Err(Error::SceneGeneration(format!("no valid scene after {MAX_SCENE_ATTEMPTS} attempts: {last}")))
}

fn try_generate<R: Rng + ?Sized>(
    grids: &GridSpec,
    content: &SceneContent,
    full: usize,
    partial: usize,
    rng: &mut R,
) -> std::result::Result<GroundTruth, String> {
    let lat = &grids.r;
    let mut used = vec![false; lat.len()];
    let pick_block = |used: &mut Vec<bool>, rng: &mut R| -> std::result::Result<(usize, usize), String> {
        for _ in 0..1000 {
            let c = rng.random_range(0..lat.cols);
            let r = rng.random_range(0..lat.rows - 1);
            let (a, b) = (lat.index(c, r), lat.index(c, r + 1));
            if !used[a] && !used[b] {
                used[a] = true;
                used[b] = true;
                return Ok((a, b));
            }
        }
        Err("no free block".into())
    };
    if lat.rows < 2 {
        return Err("block objects need at least 2 grid rows".into());
    }
    let mut t_blocks = Vec::new();
    for _ in 0..content.k_blocks {
        t_blocks.push(pick_block(&mut used, rng)?);
    }
    // Scatter blocks: `full` coincide with target blocks, `partial` share one cell.
    let mut s_cells: Vec<usize> = Vec::new();
    let mut shared: Vec<(usize, usize)> = Vec::new(); // (target cell idx in t list, scatterer cell idx)
    for (bi, &(a, b)) in t_blocks.iter().enumerate().take(full) {
        shared.push((2 * bi, s_cells.len()));
        s_cells.push(a);
        shared.push((2 * bi + 1, s_cells.len()));
        s_cells.push(b);
    }
    if partial == 1 {
        let bi = full;
        let (a, b) = t_blocks[bi];
        let (c, ra) = lat.col_row(a);
        let mut opts = Vec::new();
        if ra >= 1 && !used[lat.index(c, ra - 1)] {
            opts.push((lat.index(c, ra - 1), a, 2 * bi));
        }
        if ra + 2 < lat.rows && !used[lat.index(c, ra + 2)] {
            opts.push((b, lat.index(c, ra + 2), 2 * bi + 1));
        }
        if opts.is_empty() {
            return Err("no room for a partially overlapping scatterer".into());
        }
        let (top, bot, tcell) = opts[rng.random_range(0..opts.len())];
        let fresh = if top == a || top == b { bot } else { top };
        used[fresh] = true;
        let shared_cell = if fresh == top { bot } else { top };
        for cell in [top, bot] {
            if cell == shared_cell {
                shared.push((tcell, s_cells.len()));
            }
            s_cells.push(cell);
        }
    }
    for _ in full + partial..content.l_blocks {
        let (a, b) = pick_block(&mut used, rng)?;
        s_cells.push(a);
        s_cells.push(b);
    }
    let h = content.offset_fraction * lat.spacing / 2.0;
    let jitter = |rng: &mut R, h: f64| -> Point {
        if h > 0.0 {
            Point::new(rng.random_range(-h..h), rng.random_range(-h..h))
        } else {
            Point::default()
        }
    };
    let mut targets = Vec::new();
    for &(a, b) in &t_blocks {
        for cell in [a, b] {
            targets.push(lat.points[cell] + jitter(rng, h));
        }
    }
    let mut scatterers = Vec::new();
    for (si, &cell) in s_cells.iter().enumerate() {
        match shared.iter().find(|&&(_, s)| s == si) {
            Some(&(ti, _)) => scatterers.push(targets[ti]),
            None => scatterers.push(lat.points[cell] + jitter(rng, h)),
        }
    }
    let hz = content.offset_fraction * grids.z.spacing / 2.0;
    let pu = rng.random_range(0..grids.z.len());
    let user = grids.z.points[pu] + jitter(rng, hz);
    let overlap = shared.iter().map(|&(t, s)| (t, s)).collect();
    Ok(GroundTruth { rcs: vec![content.rcs; targets.len()], targets, scatterers, user, overlap })
}
