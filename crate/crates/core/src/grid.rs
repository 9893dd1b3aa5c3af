//! Square and hexagonal tilings of a lon/lat bounding box.
//!
//! Cells live in raw decimal degrees with no geodesic correction, the same
//! planar convention PRIO-GRID uses. The grid is anchored at the south-west
//! corner of the box, not at the global (-180, -90) origin.
//!
//! Square grids are row-major from the south-west corner. Hex grids use a
//! flat-top axial layout whose `(0, 0)` hex is centred on the south-west
//! corner; `cell_size` is the flat-to-flat width, which is also the distance
//! between the centres of adjacent hexes. Edge cells are clipped to the box.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Square,
    Hex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Edge-sharing neighbours only.
    #[default]
    Rook,
    /// Edge- and corner-sharing neighbours. Squares only.
    Queen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    #[serde(default)]
    pub shape: Shape,
    #[serde(default)]
    pub neighborhood: Neighborhood,
}

fn default_cell_size() -> f64 {
    0.5
}

impl GridSpec {
    pub fn square(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, cell_size: f64) -> Self {
        GridSpec {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
            cell_size,
            shape: Shape::Square,
            neighborhood: Neighborhood::Rook,
        }
    }

    pub fn hex(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, cell_size: f64) -> Self {
        GridSpec {
            shape: Shape::Hex,
            ..Self::square(min_lon, min_lat, max_lon, max_lat, cell_size)
        }
    }

    pub fn with_cell_size(&self, cell_size: f64) -> Self {
        GridSpec {
            cell_size,
            ..self.clone()
        }
    }

    pub fn with_neighborhood(mut self, neighborhood: Neighborhood) -> Self {
        self.neighborhood = neighborhood;
        self
    }

    pub fn width(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    /// Area of one full (unclipped) cell in square degrees.
    pub fn cell_area(&self) -> f64 {
        match self.shape {
            Shape::Square => self.cell_size * self.cell_size,
            Shape::Hex => SQRT3 / 2.0 * self.cell_size * self.cell_size,
        }
    }

    /// Hex `cell_size` whose cell area equals that of a square of side `square_size`.
    pub fn hex_size_matching_square(square_size: f64) -> f64 {
        square_size * (2.0 / SQRT3).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.min_lon, self.min_lat, self.max_lon, self.max_lat];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGrid("bounding box must be finite".into()));
        }
        if self.max_lon <= self.min_lon || self.max_lat <= self.min_lat {
            return Err(Error::InvalidGrid(format!(
                "degenerate bounding box [{}, {}] x [{}, {}]",
                self.min_lon, self.max_lon, self.min_lat, self.max_lat
            )));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.cell_size > self.width() {
            return Err(Error::InvalidGrid(format!(
                "cell_size {} exceeds box width {}",
                self.cell_size,
                self.width()
            )));
        }
        if self.shape == Shape::Hex && self.neighborhood == Neighborhood::Queen {
            return Err(Error::InvalidGrid(
                "queen neighbourhood is defined for square grids only".into(),
            ));
        }
        Ok(())
    }

    fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon < self.max_lon && lat >= self.min_lat && lat < self.max_lat
    }
}

/// Dense cell index in `[0, n_cells)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// One cell's clipped geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: CellId,
    /// Closed, counter-clockwise `[lon, lat]` ring.
    pub ring: Vec<[f64; 2]>,
    pub centroid: [f64; 2],
    pub area: f64,
    /// `(col, row)` for squares, axial `(q, r)` for hexes.
    pub coord: (i64, i64),
}

/// Symmetric, irreflexive adjacency with sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Builds a graph from arbitrary lists; they are symmetrised, sorted and
    /// stripped of self-loops and duplicates.
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        let n = adjacency.len();
        let mut extra = vec![Vec::new(); n];
        for (i, list) in adjacency.iter().enumerate() {
            for &j in list {
                assert!(j < n, "neighbour {j} out of range");
                extra[j].push(i);
            }
        }
        for (i, list) in adjacency.iter_mut().enumerate() {
            list.append(&mut extra[i]);
            list.retain(|&j| j != i);
            list.sort_unstable();
            list.dedup();
        }
        NeighborGraph { adjacency }
    }

    /// Graph with `n` isolated vertices.
    pub fn empty(n: usize) -> Self {
        NeighborGraph {
            adjacency: vec![Vec::new(); n],
        }
    }

    /// Rook-adjacency lattice, row-major.
    pub fn lattice(n_cols: usize, n_rows: usize) -> Self {
        square_adjacency(n_cols, n_rows, Neighborhood::Rook)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.adjacency[cell]
    }

    pub fn degree(&self, cell: usize) -> usize {
        self.adjacency[cell].len()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().enumerate().all(|(i, ns)| {
            ns.iter()
                .all(|&j| j != i && self.adjacency[j].binary_search(&i).is_ok())
        })
    }

    /// Greedy colouring in index order: each vertex takes the smallest colour
    /// unused by its lower-indexed neighbours.
    pub fn greedy_coloring(&self) -> Vec<usize> {
        let mut color = vec![usize::MAX; self.len()];
        let mut used = Vec::new();
        for i in 0..self.len() {
            used.clear();
            used.extend(
                self.adjacency[i]
                    .iter()
                    .map(|&j| color[j])
                    .filter(|&c| c != usize::MAX),
            );
            let mut c = 0;
            while used.contains(&c) {
                c += 1;
            }
            color[i] = c;
        }
        color
    }

    /// Vertices grouped by greedy colour; no two vertices in a class are adjacent.
    pub fn color_classes(&self) -> Vec<Vec<usize>> {
        let color = self.greedy_coloring();
        let n_colors = color.iter().copied().max().map_or(0, |m| m + 1);
        let mut classes = vec![Vec::new(); n_colors];
        for (i, &c) in color.iter().enumerate() {
            classes[c].push(i);
        }
        classes
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Square { n_cols: usize, n_rows: usize },
    Hex { index: HashMap<(i64, i64), usize> },
}

/// A built tiling: cell geometries plus the neighbour graph.
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    cells: Vec<Cell>,
    graph: NeighborGraph,
    layout: Layout,
}

impl Grid {
    pub fn build(spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        match spec.shape {
            Shape::Square => Ok(build_square(spec)),
            Shape::Hex => Ok(build_hex(spec)),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id.0]
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.graph
    }

    /// `(n_cols, n_rows)` for square grids.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self.layout {
            Layout::Square { n_cols, n_rows } => Some((n_cols, n_rows)),
            Layout::Hex { .. } => None,
        }
    }

    /// Maps a point to its cell. The box is half-open: points on the upper
    /// or right edge are `Ok(None)`, and points on an interior edge belong to
    /// the cell on the +lon/+lat side.
    pub fn locate(&self, lon: f64, lat: f64) -> Result<Option<CellId>> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::NonFiniteCoordinate { lon, lat });
        }
        let spec = &self.spec;
        if !spec.contains(lon, lat) {
            return Ok(None);
        }
        let s = spec.cell_size;
        let id = match &self.layout {
            Layout::Square { n_cols, n_rows } => {
                let col = (((lon - spec.min_lon) / s).floor() as usize).min(n_cols - 1);
                let row = (((lat - spec.min_lat) / s).floor() as usize).min(n_rows - 1);
                row * n_cols + col
            }
            Layout::Hex { index } => {
                // Nudge toward +lon/+lat so shared edges resolve like squares.
                let x = lon - spec.min_lon + s * 1e-9;
                let y = lat - spec.min_lat + s * 1e-9;
                let (q, r) = hex_round(x, y, s);
                match index.get(&(q, r)) {
                    Some(&i) => i,
                    None => nearest_kept_hex(index, q, r, x, y, s),
                }
            }
        };
        Ok(Some(CellId(id)))
    }

    /// GeoJSON `FeatureCollection`, one polygon feature per cell with a
    /// `cell_id` property plus whatever `extra` returns for that cell.
    pub fn to_geojson<F>(&self, mut extra: F) -> Value
    where
        F: FnMut(CellId) -> Map<String, Value>,
    {
        let features: Vec<Value> = self
            .cells
            .iter()
            .map(|cell| {
                let mut props = Map::new();
                props.insert("cell_id".into(), json!(cell.id.0));
                props.extend(extra(cell.id));
                json!({
                    "type": "Feature",
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [cell.ring.iter().map(|p| json!([p[0], p[1]])).collect::<Vec<_>>()],
                    },
                    "properties": Value::Object(props),
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }
}

fn cells_along(extent: f64, size: f64) -> usize {
    let ratio = extent / size;
    let nearest = ratio.round();
    let n = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        ratio.ceil()
    };
    (n as usize).max(1)
}

fn square_adjacency(n_cols: usize, n_rows: usize, hood: Neighborhood) -> NeighborGraph {
    let offsets: &[(i64, i64)] = match hood {
        Neighborhood::Rook => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
        Neighborhood::Queen => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
    };
    let mut adjacency = Vec::with_capacity(n_cols * n_rows);
    for row in 0..n_rows as i64 {
        for col in 0..n_cols as i64 {
            let mut ns: Vec<usize> = offsets
                .iter()
                .map(|&(dc, dr)| (col + dc, row + dr))
                .filter(|&(c, r)| c >= 0 && r >= 0 && c < n_cols as i64 && r < n_rows as i64)
                .map(|(c, r)| r as usize * n_cols + c as usize)
                .collect();
            ns.sort_unstable();
            adjacency.push(ns);
        }
    }
    NeighborGraph { adjacency }
}

fn build_square(spec: &GridSpec) -> Grid {
    let s = spec.cell_size;
    let n_cols = cells_along(spec.width(), s);
    let n_rows = cells_along(spec.height(), s);
    let mut cells = Vec::with_capacity(n_cols * n_rows);
    for row in 0..n_rows {
        for col in 0..n_cols {
            let x0 = spec.min_lon + col as f64 * s;
            let y0 = spec.min_lat + row as f64 * s;
            let x1 = (x0 + s).min(spec.max_lon);
            let y1 = (y0 + s).min(spec.max_lat);
            let ring = vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]];
            cells.push(Cell {
                id: CellId(cells.len()),
                ring,
                centroid: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
                area: (x1 - x0) * (y1 - y0),
                coord: (col as i64, row as i64),
            });
        }
    }
    Grid {
        spec: spec.clone(),
        cells,
        graph: square_adjacency(n_cols, n_rows, spec.neighborhood),
        layout: Layout::Square { n_cols, n_rows },
    }
}

const HEX_DIRECTIONS: [(i64, i64); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

fn hex_center(q: i64, r: i64, s: f64) -> (f64, f64) {
    let radius = s / SQRT3;
    (1.5 * radius * q as f64, s * (r as f64 + q as f64 / 2.0))
}

/// Axial coordinates of the hex containing the offset point `(x, y)`.
fn hex_round(x: f64, y: f64, s: f64) -> (i64, i64) {
    let radius = s / SQRT3;
    let qf = x / (1.5 * radius);
    let rf = y / s - qf / 2.0;
    let sf = -qf - rf;
    let (mut q, mut r, s_) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s_ - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s_;
    } else if dr > ds {
        r = -q - s_;
    }
    (q as i64, r as i64)
}

fn nearest_kept_hex(
    index: &HashMap<(i64, i64), usize>,
    q: i64,
    r: i64,
    x: f64,
    y: f64,
    s: f64,
) -> usize {
    HEX_DIRECTIONS
        .iter()
        .filter_map(|&(dq, dr)| index.get(&(q + dq, r + dr)).map(|&i| (i, q + dq, r + dr)))
        .map(|(i, hq, hr)| {
            let (cx, cy) = hex_center(hq, hr, s);
            (i, (cx - x).powi(2) + (cy - y).powi(2))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("in-box point lies next to at least one kept hex")
}

fn build_hex(spec: &GridSpec) -> Grid {
    let s = spec.cell_size;
    let radius = s / SQRT3;
    let (w, h) = (spec.width(), spec.height());
    let q_max = ((w + radius) / (1.5 * radius)).ceil() as i64 + 1;
    let min_area = 1e-9 * spec.cell_area();

    let mut cells = Vec::new();
    let mut index = HashMap::new();
    for q in 0..=q_max {
        let r_lo = (-(q as f64 + 1.0) / 2.0).floor() as i64 - 1;
        let r_hi = (h / s - q as f64 / 2.0 + 1.0).ceil() as i64 + 1;
        for r in r_lo..=r_hi {
            let (cx, cy) = hex_center(q, r, s);
            let hexagon: Vec<[f64; 2]> = (0..6)
                .map(|k| {
                    let a = std::f64::consts::PI / 3.0 * k as f64;
                    [cx + radius * a.cos(), cy + radius * a.sin()]
                })
                .collect();
            let clipped = clip_to_box(&hexagon, w, h);
            if clipped.len() < 3 {
                continue;
            }
            let (area, centroid) = polygon_area_centroid(&clipped);
            if area <= min_area {
                continue;
            }
            let mut ring: Vec<[f64; 2]> = clipped
                .iter()
                .map(|p| [p[0] + spec.min_lon, p[1] + spec.min_lat])
                .collect();
            ring.push(ring[0]);
            index.insert((q, r), cells.len());
            cells.push(Cell {
                id: CellId(cells.len()),
                ring,
                centroid: [centroid[0] + spec.min_lon, centroid[1] + spec.min_lat],
                area,
                coord: (q, r),
            });
        }
    }

    let adjacency = cells
        .iter()
        .map(|cell| {
            let (q, r) = cell.coord;
            let mut ns: Vec<usize> = HEX_DIRECTIONS
                .iter()
                .filter_map(|&(dq, dr)| index.get(&(q + dq, r + dr)).copied())
                .collect();
            ns.sort_unstable();
            ns
        })
        .collect();

    Grid {
        spec: spec.clone(),
        cells,
        graph: NeighborGraph { adjacency },
        layout: Layout::Hex { index },
    }
}

/// Sutherland-Hodgman clip of a convex polygon against `[0, w] x [0, h]`.
fn clip_to_box(poly: &[[f64; 2]], w: f64, h: f64) -> Vec<[f64; 2]> {
    // (axis, bound, keep-below)
    let planes = [(0, 0.0, false), (0, w, true), (1, 0.0, false), (1, h, true)];
    let mut out = poly.to_vec();
    for &(axis, bound, below) in &planes {
        if out.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if below { p[axis] <= bound } else { p[axis] >= bound };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (cin, pin) = (inside(&cur), inside(&prev));
            if cin != pin {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut p = [
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ];
                p[axis] = bound;
                out.push(p);
            }
            if cin {
                out.push(cur);
            }
        }
    }
    out
}

fn polygon_area_centroid(poly: &[[f64; 2]]) -> (f64, [f64; 2]) {
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a2.abs() < f64::MIN_POSITIVE {
        return (0.0, poly[0]);
    }
    (a2 / 2.0, [cx / (3.0 * a2), cy / (3.0 * a2)])
}
