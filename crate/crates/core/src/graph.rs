//! Spatial, temporal and space-time structure matrices together with the
//! sum-to-zero constraints that make intrinsic priors identifiable.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Undirected neighbourhood graph over `num_areas` areas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AreaGraph {
    num_areas: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl AreaGraph {
    /// Builds the graph from index pairs. Pairs are unordered and deduplicated.
    pub fn new(num_areas: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_areas == 0 {
            return Err(Error::Graph("graph needs at least one area".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= num_areas || b >= num_areas {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {num_areas} areas")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop at area {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { num_areas, edges: set })
    }

    pub fn num_areas(&self) -> usize {
        self.num_areas
    }

    /// Edges as `(i, j)` with `i < j`, in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_areas];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Connected components, each sorted ascending, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.num_areas).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_slot = vec![usize::MAX; self.num_areas];
        for i in 0..self.num_areas {
            let r = find(&mut parent, i);
            if root_slot[r] == usize::MAX {
                root_slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[root_slot[r]].push(i);
        }
        groups
    }

    /// Parses the adjacency text format: an `areas A` header, then one
    /// `i j` pair per line. `#` starts a comment.
    pub fn read_adjacency<R: BufRead>(reader: R) -> Result<Self> {
        let mut num_areas = None;
        let mut edges = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { location: format!("line {}", lineno + 1), message };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields[0] == "areas" {
                if fields.len() != 2 || num_areas.is_some() {
                    return Err(parse_err("malformed or repeated `areas` header".into()));
                }
                num_areas = Some(fields[1].parse::<usize>().map_err(|e| parse_err(e.to_string()))?);
                continue;
            }
            if num_areas.is_none() {
                return Err(parse_err("edge before `areas` header".into()));
            }
            if fields.len() != 2 {
                return Err(parse_err(format!("expected `i j`, got `{content}`")));
            }
            let a = fields[0].parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
            let b = fields[1].parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
            edges.push((a, b));
        }
        let n = num_areas.ok_or_else(|| Error::Parse {
            location: "end of file".into(),
            message: "missing `areas` header".into(),
        })?;
        Self::new(n, &edges)
    }

    pub fn write_adjacency<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "areas {}", self.num_areas)?;
        for (a, b) in self.edges() {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    }
}

/// Four-neighbour lattice with `rows × cols` areas, numbered row-major.
pub fn grid_graph(rows: usize, cols: usize) -> Result<AreaGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::Graph("grid needs at least one row and one column".into()));
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((i, i + 1));
            }
            if r + 1 < rows {
                edges.push((i, i + cols));
            }
        }
    }
    AreaGraph::new(rows * cols, &edges)
}

/// Kind tag of a structure matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureKind {
    Icar,
    Rw1,
    Iid,
    TypeI,
    TypeII,
    TypeIII,
    TypeIV,
}

impl StructureKind {
    /// Whether every row of this kind's matrix sums to zero.
    pub fn has_zero_row_sums(self) -> bool {
        !matches!(self, StructureKind::Iid | StructureKind::TypeI)
    }
}

/// Knorr-Held space-time interaction type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractionType {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "IV")]
    IV,
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InteractionType::I => "I",
            InteractionType::II => "II",
            InteractionType::III => "III",
            InteractionType::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for InteractionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(InteractionType::I),
            "II" | "2" => Ok(InteractionType::II),
            "III" | "3" => Ok(InteractionType::III),
            "IV" | "4" => Ok(InteractionType::IV),
            other => Err(Error::Structure(format!("unknown interaction type `{other}`"))),
        }
    }
}

/// Sparse symmetric positive semi-definite precision structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix<T> {
    kind: StructureKind,
    matrix: CscMatrix<T>,
    null_dim: usize,
}

impl<T: Real> StructureMatrix<T> {
    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn matrix(&self) -> &CscMatrix<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Declared rank deficiency.
    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.null_dim
    }

    pub fn identity(n: usize) -> Self {
        Self { kind: StructureKind::Iid, matrix: CscMatrix::identity(n), null_dim: 0 }
    }

    pub fn quad_form(&self, x: &[T]) -> T {
        self.matrix.quad_form(x)
    }
}

/// Besag ICAR structure: degree on the diagonal, −1 for each neighbour pair.
pub fn icar_structure<T: Real>(g: &AreaGraph) -> Result<StructureMatrix<T>> {
    let a = g.num_areas();
    if a < 2 {
        return Err(Error::Structure("ICAR structure needs at least two areas".into()));
    }
    let mut trips: Vec<(usize, usize, T)> =
        g.degrees().iter().enumerate().map(|(i, &d)| (i, i, T::lit(d as f64))).collect();
    for (i, j) in g.edges() {
        trips.push((i, j, -T::one()));
        trips.push((j, i, -T::one()));
    }
    Ok(StructureMatrix {
        kind: StructureKind::Icar,
        matrix: CscMatrix::from_triplets(a, a, &trips)?,
        null_dim: g.components().len(),
    })
}

/// First-order random walk structure over `num_years` time points.
pub fn rw1_structure<T: Real>(num_years: usize) -> Result<StructureMatrix<T>> {
    if num_years < 2 {
        return Err(Error::Structure(format!("RW1 needs at least two time points, got {num_years}")));
    }
    let mut trips = Vec::with_capacity(3 * num_years);
    for t in 0..num_years {
        let diag = if t == 0 || t + 1 == num_years { 1.0 } else { 2.0 };
        trips.push((t, t, T::lit(diag)));
        if t + 1 < num_years {
            trips.push((t, t + 1, -T::one()));
            trips.push((t + 1, t, -T::one()));
        }
    }
    Ok(StructureMatrix {
        kind: StructureKind::Rw1,
        matrix: CscMatrix::from_triplets(num_years, num_years, &trips)?,
        null_dim: 1,
    })
}

/// Space-time interaction structure. Latent ordering is area-fastest:
/// index `t·A + i`.
pub fn interaction_structure<T: Real>(
    ty: InteractionType,
    r_gamma: &StructureMatrix<T>,
    r_kappa: &StructureMatrix<T>,
) -> Result<StructureMatrix<T>> {
    if r_gamma.kind != StructureKind::Rw1 {
        return Err(Error::Structure(format!("temporal factor must be RW1, got {:?}", r_gamma.kind)));
    }
    let needs_icar = matches!(ty, InteractionType::III | InteractionType::IV);
    if needs_icar && r_kappa.kind != StructureKind::Icar {
        return Err(Error::Structure(format!("spatial factor must be ICAR for type {ty}, got {:?}", r_kappa.kind)));
    }
    let nt = r_gamma.dim();
    let na = r_kappa.dim();
    let it = CscMatrix::identity(nt);
    let ia = CscMatrix::identity(na);
    let (kind, matrix, null_dim) = match ty {
        InteractionType::I => (StructureKind::TypeI, it.kron(&ia), 0),
        InteractionType::II => (StructureKind::TypeII, r_gamma.matrix.kron(&ia), r_gamma.null_dim * na),
        InteractionType::III => (StructureKind::TypeIII, it.kron(&r_kappa.matrix), nt * r_kappa.null_dim),
        InteractionType::IV => (
            StructureKind::TypeIV,
            r_gamma.matrix.kron(&r_kappa.matrix),
            na * nt - r_gamma.rank() * r_kappa.rank(),
        ),
    };
    Ok(StructureMatrix { kind, matrix, null_dim })
}

/// Linear sum-to-zero constraints over one latent block; one dense row per constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T> {
    rows: Vec<Vec<T>>,
    block_len: usize,
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(block_len: usize, rows: Vec<Vec<T>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != block_len) {
            return Err(Error::Structure("constraint row length differs from block length".into()));
        }
        Ok(Self { rows, block_len })
    }

    fn from_index_sets(block_len: usize, sets: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let rows = sets
            .into_iter()
            .map(|members| {
                let mut r = vec![T::zero(); block_len];
                for m in members {
                    r[m] = T::one();
                }
                r
            })
            .collect();
        Self { rows, block_len }
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `A x` for a block vector.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.rows.iter().map(|r| crate::scalar::dot(r, x)).collect()
    }

    /// Largest absolute constraint violation.
    pub fn max_violation(&self, x: &[T]) -> T {
        self.apply(x).into_iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// One sum-to-zero row per connected component of the graph.
pub fn icar_constraints<T: Real>(g: &AreaGraph) -> ConstraintSet<T> {
    ConstraintSet::from_index_sets(g.num_areas(), g.components())
}

/// Single sum-to-zero row over all time points.
pub fn rw1_constraints<T: Real>(num_years: usize) -> ConstraintSet<T> {
    ConstraintSet::from_index_sets(num_years, [(0..num_years).collect()])
}

/// Identifiability constraints of an interaction block (index `t·A + i`).
///
/// Spatial sums are taken per connected component. For type IV the double
/// sum is implied by the two families, so the last area of each component
/// loses its temporal-sum row.
pub fn constraints_for<T: Real>(ty: InteractionType, g: &AreaGraph, num_years: usize) -> Result<ConstraintSet<T>> {
    let na = g.num_areas();
    if na < 2 || num_years < 2 {
        return Err(Error::Structure("interaction constraints need A ≥ 2 and T ≥ 2".into()));
    }
    let len = na * num_years;
    let comps = g.components();
    let per_year_spatial = || {
        (0..num_years).flat_map(|t| comps.iter().map(move |c| c.iter().map(|&i| t * na + i).collect::<Vec<_>>()))
    };
    let per_area_temporal = |i: usize| (0..num_years).map(|t| t * na + i).collect::<Vec<_>>();

    let set = match ty {
        InteractionType::I => ConstraintSet::from_index_sets(len, [(0..len).collect()]),
        InteractionType::II => ConstraintSet::from_index_sets(len, (0..na).map(per_area_temporal)),
        InteractionType::III => ConstraintSet::from_index_sets(len, per_year_spatial()),
        InteractionType::IV => {
            let last_of_component: BTreeSet<usize> = comps.iter().map(|c| *c.last().unwrap()).collect();
            let temporal = (0..na).filter(|i| !last_of_component.contains(i)).map(per_area_temporal);
            ConstraintSet::from_index_sets(len, per_year_spatial().chain(temporal))
        }
    };
    Ok(set)
}
