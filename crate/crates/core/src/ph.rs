//! 0-dimensional persistent homology of 2D scalar maps.
//!
//! The filtration is by superlevel sets: sweeping the threshold downward,
//! a pixel enters the complex once the threshold drops to its value, and
//! orthogonally adjacent pixels present in the complex are joined by 1-cells
//! (8-adjacency is available as an option). Components are tracked with a
//! union-find; on a merge the elder rule keeps the component born at the
//! higher value, with ties resolved towards the lower raster index.
//!
//! Pixels are ordered by decreasing value and, for equal values, by raster
//! index. A component that is born and absorbed at the same threshold has
//! zero persistence and is not visible in the filtration; such pairs are not
//! recorded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel adjacency used to connect 0-cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub(crate) fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// An `H × W` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    /// Wrap already-normalized values (row-major).
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("scalar map needs positive dimensions"));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "scalar map values must lie in [0,1], found {v}"
            )));
        }
        Ok(ScalarMap {
            height,
            width,
            values,
        })
    }

    /// Min-max normalize raw values into `[0, 1]`; a constant map becomes
    /// all zeros.
    pub fn normalized(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar map input".into()));
        }
        ScalarMap::new(height, width, min_max_normalize(raw))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn coord(&self, idx: usize) -> Coord {
        Coord {
            x: idx % self.width,
            y: idx / self.width,
        }
    }
}

/// Min-max normalization to `[0, 1]`; constant input maps to zeros.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; raw.len()];
    }
    raw.iter()
        .map(|v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect()
}

/// Integer pixel coordinate; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: usize,
    pub y: usize,
}

impl Coord {
    pub fn new(x: usize, y: usize) -> Self {
        Coord { x, y }
    }
}

/// Birth and death of one component in the superlevel filtration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    pub birth_coord: Coord,
    pub death_coord: Coord,
    pub essential: bool,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        (self.birth - self.death).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub pairs: Vec<PersistencePair>,
}

pub const CSV_HEADER: &str = "birth,death,bx,by,dx,dy,essential";

impl PersistenceDiagram {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV with header `birth,death,bx,by,dx,dy,essential`; thresholds are
    /// written with 9 significant digits, `essential` as `1`/`0`.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(32 * (self.pairs.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                format_sig9(p.birth),
                format_sig9(p.death),
                p.birth_coord.x,
                p.birth_coord.y,
                p.death_coord.x,
                p.death_coord.y,
                u8::from(p.essential)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            _ => return Err(Error::format("diagram CSV", "missing header")),
        }
        let bad = |line: &str| Error::format("diagram CSV", format!("bad row `{line}`"));
        let mut pairs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            pairs.push(PersistencePair {
                birth: num(f[0])?,
                death: num(f[1])?,
                birth_coord: Coord::new(idx(f[2])?, idx(f[3])?),
                death_coord: Coord::new(idx(f[4])?, idx(f[5])?),
                essential: match f[6] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad(line)),
                },
            });
        }
        Ok(PersistenceDiagram { pairs })
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mant.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Pixel coordinates of a pair's birth and death events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Generator {
    pub birth: Coord,
    pub death: Coord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSet {
    pub entries: Vec<Generator>,
}

impl GeneratorSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Generator> {
        self.entries.iter()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[i] != root {
            let next = self.parent[i];
            self.parent[i] = root;
            i = next;
        }
        root
    }
}

/// 0-dimensional persistence of `map` under the superlevel filtration.
///
/// Non-essential pairs appear in the order their deaths occur; the
/// essential pair (death at the global minimum, first argmin in raster
/// order) is last.
pub fn compute_ph0(map: &ScalarMap, connectivity: Connectivity) -> PersistenceDiagram {
    let (h, w) = (map.height, map.width);
    let v = &map.values;
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Decreasing value, then raster order.
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    // Position in the sweep; a lower rank is the elder.
    let mut rank = vec![0usize; n];
    for (r, &p) in order.iter().enumerate() {
        rank[p] = r;
    }

    let mut uf = UnionFind::new(n);
    let mut present = vec![false; n];
    let mut pairs = Vec::new();
    let mut roots: Vec<usize> = Vec::with_capacity(8);
    for &p in &order {
        present[p] = true;
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        roots.clear();
        for &(dy, dx) in connectivity.offsets() {
            let (ny, nx) = (py + dy, px + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let q = ny as usize * w + nx as usize;
            if present[q] {
                let r = uf.find(q);
                if !roots.contains(&r) {
                    roots.push(r);
                }
            }
        }
        let Some(&elder) = roots.iter().min_by_key(|&&r| rank[r]) else {
            // New component rooted at p.
            continue;
        };
        uf.parent[p] = elder;
        roots.sort_by_key(|&r| rank[r]);
        for &r in roots.iter().skip(1) {
            uf.parent[r] = elder;
            if v[r] > v[p] {
                pairs.push(PersistencePair {
                    birth: v[r],
                    death: v[p],
                    birth_coord: map.coord(r),
                    death_coord: map.coord(p),
                    essential: false,
                });
            }
        }
    }

    let root = uf.find(order[0]);
    let min_idx = order[n - 1];
    // The last pixel in the sweep has the minimum value; the first argmin
    // in raster order is the first pixel with that value.
    let argmin = (0..n).find(|&i| v[i] == v[min_idx]).unwrap_or(min_idx);
    pairs.push(PersistencePair {
        birth: v[root],
        death: v[argmin],
        birth_coord: map.coord(root),
        death_coord: map.coord(argmin),
        essential: true,
    });
    PersistenceDiagram { pairs }
}

/// Map every pair to its birth and death pixel coordinates.
pub fn pairs_to_generators(pd: &PersistenceDiagram) -> GeneratorSet {
    GeneratorSet {
        entries: pd
            .pairs
            .iter()
            .map(|p| Generator {
                birth: p.birth_coord,
                death: p.death_coord,
            })
            .collect(),
    }
}

/// Keep generator `i` iff `pers(pd[i]) > tau0`.
pub fn filter_generators(
    pd: &PersistenceDiagram,
    generators: &GeneratorSet,
    tau0: f64,
) -> Result<GeneratorSet> {
    if pd.len() != generators.len() {
        return Err(Error::invalid(format!(
            "diagram has {} pairs but generator set has {} entries",
            pd.len(),
            generators.len()
        )));
    }
    if !(tau0 >= 0.0) {
        return Err(Error::invalid(format!("tau0 must be non-negative, got {tau0}")));
    }
    let entries = pd
        .pairs
        .iter()
        .zip(&generators.entries)
        .filter(|(p, _)| p.persistence() > tau0)
        .map(|(_, g)| *g)
        .collect();
    Ok(GeneratorSet { entries })
}
