//! Recursive partitioning of the unit hyper-cube.
//!
//! Layer `l` (1-based) of a scheme with per-dimension branching `b` splits
//! dimension `i` into `b_i^(l-1)` equal cells. Components are numbered
//! breadth-first: the root is `0`, then layer 2 left to right, and so on.
//! Cells are half-open on their lower face (closed on the domain boundary), so
//! a point on a shared face belongs to the sibling with the smaller index and
//! every point of `[0,1]^d` lies in exactly one cell per layer.

use std::fmt::Write as _;

use crate::error::{Result, SagpError};
use crate::linalg::{HyperBox, Points};

pub type ComponentId = usize;

const MAX_COMPONENTS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub id: ComponentId,
    /// 1-based layer index.
    pub layer: usize,
    /// Cell index per dimension within the layer.
    pub cell: Vec<usize>,
    pub bbox: HyperBox,
    pub parent: Option<ComponentId>,
    pub children: Vec<ComponentId>,
    pub active: bool,
}

impl Component {
    pub fn centroid(&self) -> Vec<f64> {
        self.bbox.centroid()
    }

    /// Half-width per dimension; equal across dimensions when the branching is.
    pub fn half_widths(&self) -> Vec<f64> {
        self.bbox.half_widths()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bbox.contains(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpScheme {
    dim: usize,
    branching: Vec<usize>,
    m_required: usize,
    components: Vec<Component>,
    layers: Vec<Vec<ComponentId>>,
}

/// Build the complete scheme with every component active.
pub fn build_full_rp(dim: usize, branching: &[usize], n_layers: usize, m: usize) -> Result<RpScheme> {
    if dim == 0 {
        return Err(SagpError::InvalidInput("dimension must be at least 1".into()));
    }
    if n_layers == 0 {
        return Err(SagpError::InvalidInput("layer count must be at least 1".into()));
    }
    if m == 0 {
        return Err(SagpError::InvalidInput("pseudo-input count must be at least 1".into()));
    }
    let branching = expand_branching(dim, branching)?;

    let mut total: usize = 0;
    let per_node: usize = branching.iter().product();
    let mut layer_size: usize = 1;
    for l in 0..n_layers {
        if l > 0 {
            layer_size = layer_size.saturating_mul(per_node);
        }
        total = total.saturating_add(layer_size);
    }
    if total > MAX_COMPONENTS {
        return Err(SagpError::InvalidInput(format!(
            "scheme would have {total} components (limit {MAX_COMPONENTS})"
        )));
    }

    let mut components = Vec::with_capacity(total);
    components.push(Component {
        id: 0,
        layer: 1,
        cell: vec![0; dim],
        bbox: HyperBox::unit(dim),
        parent: None,
        children: Vec::new(),
        active: true,
    });
    let mut layers = vec![vec![0]];

    for layer in 2..=n_layers {
        let cells_per_dim: Vec<usize> = branching
            .iter()
            .map(|&b| b.pow(layer as u32 - 1))
            .collect();
        let mut ids = Vec::new();
        for &parent in &layers[layer - 2] {
            let parent_cell = components[parent].cell.clone();
            for offset in child_offsets(&branching) {
                let cell: Vec<usize> = parent_cell
                    .iter()
                    .zip(&branching)
                    .zip(&offset)
                    .map(|((&c, &b), &o)| c * b + o)
                    .collect();
                let id = components.len();
                components.push(Component {
                    id,
                    layer,
                    bbox: cell_box(&cell, &cells_per_dim),
                    cell,
                    parent: Some(parent),
                    children: Vec::new(),
                    active: true,
                });
                components[parent].children.push(id);
                ids.push(id);
            }
        }
        layers.push(ids);
    }

    Ok(RpScheme {
        dim,
        branching,
        m_required: m,
        components,
        layers,
    })
}

fn expand_branching(dim: usize, branching: &[usize]) -> Result<Vec<usize>> {
    let b = match branching.len() {
        1 => vec![branching[0]; dim],
        len if len == dim => branching.to_vec(),
        len => {
            return Err(SagpError::InvalidInput(format!(
                "branching has {len} entries for dimension {dim}"
            )))
        }
    };
    if b.iter().any(|&v| v < 2) {
        return Err(SagpError::InvalidInput(format!(
            "every branching factor must be at least 2, got {b:?}"
        )));
    }
    Ok(b)
}

/// Lexicographic child offsets, last dimension fastest.
fn child_offsets(branching: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &b in branching {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..b).map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    out
}

fn cell_box(cell: &[usize], cells_per_dim: &[usize]) -> HyperBox {
    // c/k is correctly rounded, so a child's face (c*b)/(k*b) is bit-identical
    // to its parent's face c/k and nesting survives floating point.
    let lo = cell
        .iter()
        .zip(cells_per_dim)
        .map(|(&c, &k)| c as f64 / k as f64)
        .collect();
    let hi = cell
        .iter()
        .zip(cells_per_dim)
        .map(|(&c, &k)| (c + 1) as f64 / k as f64)
        .collect();
    let low_closed = cell.iter().map(|&c| c == 0).collect();
    HyperBox::with_faces(lo, hi, low_closed).expect("cell boxes are well formed")
}

impl RpScheme {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branching(&self) -> &[usize] {
        &self.branching
    }

    pub fn m_required(&self) -> usize {
        self.m_required
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, id: ComponentId) -> &Component {
        &self.components[id]
    }

    pub fn layers(&self) -> &[Vec<ComponentId>] {
        &self.layers
    }

    /// Active component ids in ascending (breadth-first) order.
    pub fn active_ids(&self) -> Vec<ComponentId> {
        self.components
            .iter()
            .filter(|c| c.active)
            .map(|c| c.id)
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.components.iter().filter(|c| c.active).count()
    }

    /// Deepest layer that still has an active component.
    pub fn active_depth(&self) -> usize {
        self.components
            .iter()
            .filter(|c| c.active)
            .map(|c| c.layer)
            .max()
            .unwrap_or(0)
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(SagpError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SagpError::InvalidInput(format!(
                "point {x:?} lies outside the unit hyper-cube"
            )));
        }
        Ok(())
    }

    /// Root-to-leaf chain of components (active or not) whose cells contain `x`.
    pub fn path(&self, x: &[f64]) -> Result<Vec<ComponentId>> {
        self.check_domain(x)?;
        let mut path = Vec::with_capacity(self.n_layers());
        let mut node = 0;
        path.push(node);
        while !self.components[node].children.is_empty() {
            node = *self.components[node]
                .children
                .iter()
                .find(|&&c| self.components[c].contains(x))
                .ok_or_else(|| {
                    SagpError::Invariant(format!("no child of component {node} contains {x:?}"))
                })?;
            path.push(node);
        }
        Ok(path)
    }

    /// Active components containing `x`, one per active layer, root first.
    pub fn locate(&self, x: &[f64]) -> Result<Vec<ComponentId>> {
        Ok(self
            .path(x)?
            .into_iter()
            .take_while(|&id| self.components[id].active)
            .collect())
    }

    /// Paths for every point in `x`.
    pub fn paths(&self, x: &Points) -> Result<Vec<Vec<ComponentId>>> {
        x.iter().map(|p| self.path(p)).collect()
    }

    /// Number of points of `x` inside each component.
    pub fn counts(&self, x: &Points) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; self.components.len()];
        for p in x.iter() {
            for id in self.path(p)? {
                counts[id] += 1;
            }
        }
        Ok(counts)
    }

    /// `id` and all its descendants, grouped by layer.
    fn subtree_by_layer(&self, id: ComponentId) -> Vec<Vec<ComponentId>> {
        let mut out = vec![Vec::new(); self.n_layers()];
        let mut stack = vec![id];
        while let Some(c) = stack.pop() {
            out[self.components[c].layer - 1].push(c);
            stack.extend(self.components[c].children.iter().copied());
        }
        out
    }

    /// Active components in the subtree rooted at `id` (including `id`).
    pub fn active_in_subtree(&self, id: ComponentId) -> usize {
        self.subtree_by_layer(id)
            .iter()
            .flatten()
            .filter(|&&c| self.components[c].active)
            .count()
    }

    /// Bottom-up pruning: each component must hold at least `m` observations
    /// for itself and for every active component nested inside it; whole
    /// layers of nested components are switched off, deepest first, until the
    /// requirement is met.
    pub fn prune(&self, x: &Points) -> Result<RpScheme> {
        if x.dim() != self.dim {
            return Err(SagpError::DimensionMismatch {
                expected: self.dim,
                got: x.dim(),
            });
        }
        let n = x.len();
        let m = self.m_required;
        if n < m {
            return Err(SagpError::DatasetTooSmall { n, required: m });
        }
        let counts = self.counts(x)?;
        let mut pruned = self.clone();
        let n_layers = self.n_layers();
        for l in (1..=n_layers).rev() {
            for &j in &self.layers[l - 1] {
                let by_layer = pruned.subtree_by_layer(j);
                for s in (l..=n_layers).rev() {
                    let active = by_layer
                        .iter()
                        .flatten()
                        .filter(|&&c| pruned.components[c].active)
                        .count();
                    if counts[j] >= m * active {
                        break;
                    }
                    for &c in &by_layer[s - 1] {
                        pruned.components[c].active = false;
                    }
                }
            }
        }
        if !pruned.components[0].active {
            return Err(SagpError::DatasetTooSmall { n, required: m });
        }
        Ok(pruned)
    }

    /// Components violating the pruning feasibility condition on `x`, or
    /// whose parent is inactive while they are active.
    pub fn feasibility_violations(&self, x: &Points) -> Result<Vec<ComponentId>> {
        let counts = self.counts(x)?;
        Ok(self
            .components
            .iter()
            .filter(|c| c.active)
            .filter(|c| {
                let parent_off = c.parent.is_some_and(|p| !self.components[p].active);
                parent_off || counts[c.id] < self.m_required * self.active_in_subtree(c.id)
            })
            .map(|c| c.id)
            .collect())
    }

    /// Plain-text serialization: a `key=value` header followed by a CSV table.
    /// Multi-dimensional centroids and half-widths are `;`-joined.
    pub fn to_text(&self, counts: Option<&[usize]>) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";");
        let _ = writeln!(s, "# sagp recursive partitioning scheme");
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "branching={}", join(&self.branching));
        let _ = writeln!(s, "layers={}", self.n_layers());
        let _ = writeln!(s, "m={}", self.m_required);
        let header = if counts.is_some() {
            "id,layer,parent,active,centroid,half_width,count"
        } else {
            "id,layer,parent,active,centroid,half_width"
        };
        let _ = writeln!(s, "{header}");
        let fmt = |v: Vec<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        for c in &self.components {
            let parent = c.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                c.id,
                c.layer,
                parent,
                u8::from(c.active),
                fmt(c.centroid()),
                fmt(c.half_widths())
            );
            if let Some(counts) = counts {
                let _ = write!(s, ",{}", counts[c.id]);
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of [`RpScheme::to_text`]. The geometry is rebuilt from the
    /// header; the table supplies the active flags and is cross-checked.
    pub fn from_text(text: &str) -> Result<RpScheme> {
        let bad = |msg: String| SagpError::InvalidInput(format!("scheme file: {msg}"));
        let mut dim = None;
        let mut branching = None;
        let mut n_layers = None;
        let mut m = None;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        for line in lines.by_ref() {
            if line.starts_with("id,") {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
            match k.trim() {
                "dim" => dim = Some(parse(v)?),
                "layers" => n_layers = Some(parse(v)?),
                "m" => m = Some(parse(v)?),
                "branching" => {
                    branching = Some(v.split(';').map(parse).collect::<Result<Vec<_>>>()?)
                }
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        let (dim, branching, n_layers, m) = match (dim, branching, n_layers, m) {
            (Some(d), Some(b), Some(l), Some(m)) => (d, b, l, m),
            _ => return Err(bad("incomplete header".into())),
        };
        let mut scheme = build_full_rp(dim, &branching, n_layers, m)?;
        let mut seen = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(bad(format!("short row `{line}`")));
            }
            let id: usize = fields[0].parse().map_err(|e| bad(format!("id: {e}")))?;
            let layer: usize = fields[1].parse().map_err(|e| bad(format!("layer: {e}")))?;
            let comp = scheme
                .components
                .get_mut(id)
                .ok_or_else(|| bad(format!("unknown component {id}")))?;
            if comp.layer != layer {
                return Err(bad(format!("component {id} is not in layer {layer}")));
            }
            comp.active = match fields[3] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("bad active flag `{other}`"))),
            };
            seen += 1;
        }
        if seen != scheme.components.len() {
            return Err(bad(format!(
                "expected {} rows, found {seen}",
                scheme.components.len()
            )));
        }
        let orphan = scheme
            .components
            .iter()
            .any(|c| c.active && c.parent.is_some_and(|p| !scheme.components[p].active));
        if orphan || !scheme.components[0].active {
            return Err(bad("active components do not form a rooted subtree".into()));
        }
        Ok(scheme)
    }
}
