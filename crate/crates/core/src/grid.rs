//! Spatial domain: D8 drainage plan, descriptor maps and gauge geometry.
//!
//! Cells are addressed by their row-major index `row * ncols + col`. All
//! per-cell vectors in the crate span the full grid; values at inactive cells
//! are never read.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};

/// D8 code marking a cell that drains out of the domain.
pub const OUTLET: u8 = 0;

/// Row/column offsets for D8 codes 1..=8, clockwise starting at East.
const D8_OFFSETS: [(i64, i64); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

/// Offset `(drow, dcol)` for a D8 code, `None` for [`OUTLET`].
pub fn d8_offset(code: u8) -> Option<(i64, i64)> {
    match code {
        1..=8 => Some(D8_OFFSETS[code as usize - 1]),
        _ => None,
    }
}

/// D8 code pointing from a cell to the neighbour at `(drow, dcol)`.
pub fn d8_code(drow: i64, dcol: i64) -> Option<u8> {
    D8_OFFSETS
        .iter()
        .position(|&o| o == (drow, dcol))
        .map(|i| i as u8 + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrainagePlan {
    nrows: usize,
    ncols: usize,
    cell_size: f64,
    /// `None` outside the domain.
    flow_dir: Vec<Option<u8>>,
    downstream: Vec<Option<usize>>,
    upstream_offsets: Vec<usize>,
    upstream: Vec<usize>,
    topo_order: Vec<usize>,
    active: Vec<usize>,
}

impl DrainagePlan {
    /// Builds a plan from per-cell D8 codes (`None` = inactive cell).
    pub fn new(
        nrows: usize,
        ncols: usize,
        cell_size: f64,
        flow_dir: Vec<Option<u8>>,
    ) -> Result<Self> {
        if flow_dir.len() != nrows * ncols {
            return Err(Error::DimensionMismatch(format!(
                "flow direction grid has {} cells, expected {}x{}",
                flow_dir.len(),
                nrows,
                ncols
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        let downstream = downstream_links(nrows, ncols, &flow_dir)?;
        let topo_order = order_from_links(ncols, &flow_dir, &downstream)?;

        let n = nrows * ncols;
        let mut counts = vec![0usize; n + 1];
        for d in downstream.iter().flatten() {
            counts[*d + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut upstream = vec![0usize; counts[n]];
        // ascending cell index within each upstream list
        for (cell, d) in downstream.iter().enumerate() {
            if let Some(d) = d {
                upstream[fill[*d]] = cell;
                fill[*d] += 1;
            }
        }
        let active = (0..n).filter(|&i| flow_dir[i].is_some()).collect();

        Ok(Self {
            nrows,
            ncols,
            cell_size,
            flow_dir,
            downstream,
            upstream_offsets: counts,
            upstream,
            topo_order,
            active,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn n_cells(&self) -> usize {
        self.nrows * self.ncols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Cell area in m².
    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn flow_dir(&self) -> &[Option<u8>] {
        &self.flow_dir
    }

    pub fn is_active(&self, cell: usize) -> bool {
        self.flow_dir.get(cell).is_some_and(|c| c.is_some())
    }

    /// Active cells in row-major order.
    pub fn active_cells(&self) -> &[usize] {
        &self.active
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.flow_dir.iter().map(|c| c.is_some()).collect()
    }

    pub fn downstream(&self, cell: usize) -> Option<usize> {
        self.downstream[cell]
    }

    /// Cells draining directly into `cell`, ascending.
    pub fn upstream(&self, cell: usize) -> &[usize] {
        &self.upstream[self.upstream_offsets[cell]..self.upstream_offsets[cell + 1]]
    }

    /// Active cells, every cell after all cells draining into it.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.ncols, cell % self.ncols)
    }

    /// Outlet cells (D8 code [`OUTLET`]), ascending.
    pub fn outlets(&self) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&c| self.flow_dir[c] == Some(OUTLET))
            .collect()
    }

    /// Number of cells draining through each cell, itself included.
    pub fn accumulation(&self) -> Vec<usize> {
        let mut acc = vec![0usize; self.n_cells()];
        for &c in &self.topo_order {
            acc[c] += 1;
            if let Some(d) = self.downstream[c] {
                acc[d] += acc[c];
            }
        }
        acc
    }
}

fn downstream_links(
    nrows: usize,
    ncols: usize,
    flow_dir: &[Option<u8>],
) -> Result<Vec<Option<usize>>> {
    let mut downstream = vec![None; flow_dir.len()];
    for (cell, code) in flow_dir.iter().enumerate() {
        let Some(code) = *code else { continue };
        let (row, col) = (cell / ncols, cell % ncols);
        if code == OUTLET {
            continue;
        }
        let Some((dr, dc)) = d8_offset(code) else {
            return Err(Error::InvalidFlowCode {
                row,
                col,
                code: code as i64,
            });
        };
        let (nr, nc) = (row as i64 + dr, col as i64 + dc);
        if nr < 0 || nc < 0 || nr >= nrows as i64 || nc >= ncols as i64 {
            return Err(Error::DanglingFlowDirection { row, col });
        }
        let target = nr as usize * ncols + nc as usize;
        if flow_dir[target].is_none() {
            return Err(Error::DanglingFlowDirection { row, col });
        }
        downstream[cell] = Some(target);
    }
    Ok(downstream)
}

fn order_from_links(
    ncols: usize,
    flow_dir: &[Option<u8>],
    downstream: &[Option<usize>],
) -> Result<Vec<usize>> {
    let n = flow_dir.len();
    let mut indegree = vec![0usize; n];
    for d in downstream.iter().flatten() {
        indegree[*d] += 1;
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&c| flow_dir[c].is_some() && indegree[c] == 0)
        .map(Reverse)
        .collect();
    let n_active = flow_dir.iter().filter(|c| c.is_some()).count();
    let mut order = Vec::with_capacity(n_active);
    while let Some(Reverse(c)) = ready.pop() {
        order.push(c);
        if let Some(d) = downstream[c] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    if order.len() < n_active {
        // Every leftover cell is on a cycle or drains into one; walking
        // downstream long enough always lands on the cycle itself.
        let start = (0..n)
            .find(|&c| flow_dir[c].is_some() && indegree[c] > 0)
            .expect("leftover cell");
        let mut c = start;
        for _ in 0..n {
            c = downstream[c].expect("cycle member has a downstream link");
        }
        return Err(Error::CycleDetected {
            row: c / ncols,
            col: c % ncols,
        });
    }
    Ok(order)
}

/// Upstream-before-downstream ordering of the active cells of a D8 grid.
///
/// Ties are broken by row-major cell index, so the result is deterministic.
pub fn topological_order(
    nrows: usize,
    ncols: usize,
    flow_dir: &[Option<u8>],
) -> Result<Vec<usize>> {
    let downstream = downstream_links(nrows, ncols, flow_dir)?;
    order_from_links(ncols, flow_dir, &downstream)
}

/// Mask of every cell whose downstream path passes through `cell`.
pub fn delineate_catchment(plan: &DrainagePlan, cell: usize) -> Result<Vec<bool>> {
    if !plan.is_active(cell) {
        let (row, col) = if cell < plan.n_cells() {
            plan.coords(cell)
        } else {
            (cell / plan.ncols.max(1), cell % plan.ncols.max(1))
        };
        return Err(Error::InactiveCell { row, col });
    }
    let mut mask = vec![false; plan.n_cells()];
    let mut queue = VecDeque::from([cell]);
    mask[cell] = true;
    while let Some(c) = queue.pop_front() {
        for &u in plan.upstream(c) {
            if !mask[u] {
                mask[u] = true;
                queue.push_back(u);
            }
        }
    }
    Ok(mask)
}

/// Physical descriptor maps aligned to a drainage plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorStack {
    pub names: Vec<String>,
    /// One full-grid map per descriptor.
    pub maps: Vec<Vec<f64>>,
    /// Raw `(min, max)` per descriptor once normalized, `None` while raw.
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl DescriptorStack {
    pub fn new(names: Vec<String>, maps: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != maps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} descriptor names for {} maps",
                names.len(),
                maps.len()
            )));
        }
        Ok(Self {
            names,
            maps,
            normalization: None,
        })
    }

    pub fn n_desc(&self) -> usize {
        self.maps.len()
    }

    /// Descriptor vector at one cell.
    pub fn at(&self, cell: usize) -> impl Iterator<Item = f64> + '_ {
        self.maps.iter().map(move |m| m[cell])
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }
}

/// Global min-max rescaling of every descriptor to [0, 1] over active cells.
pub fn normalize_descriptors(
    plan: &DrainagePlan,
    raw: &DescriptorStack,
) -> Result<DescriptorStack> {
    let mut maps = Vec::with_capacity(raw.n_desc());
    let mut norm = Vec::with_capacity(raw.n_desc());
    for (name, map) in raw.names.iter().zip(&raw.maps) {
        if map.len() != plan.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "descriptor '{name}' has {} cells, expected {}",
                map.len(),
                plan.n_cells()
            )));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &c in plan.active_cells() {
            let v = map[c];
            if !v.is_finite() {
                return Err(Error::NonFiniteDescriptor { name: name.clone() });
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return Err(Error::ConstantDescriptor { name: name.clone() });
        }
        let span = hi - lo;
        let mut out = vec![0.0; map.len()];
        for &c in plan.active_cells() {
            out[c] = ((map[c] - lo) / span).clamp(0.0, 1.0);
        }
        maps.push(out);
        norm.push((lo, hi));
    }
    Ok(DescriptorStack {
        names: raw.names.clone(),
        maps,
        normalization: Some(norm),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gauge {
    pub id: String,
    pub cell: usize,
    pub weight: f64,
    /// Observed discharge (m³/s) per timestep; may be empty for
    /// locations that are only simulated.
    pub observed: Vec<f64>,
}

/// Gauges with their upstream masks and the ungauged remainder of the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeSet {
    gauges: Vec<Gauge>,
    upstream_masks: Vec<Vec<bool>>,
    ungauged_mask: Vec<bool>,
}

impl GaugeSet {
    pub fn new(plan: &DrainagePlan, gauges: Vec<Gauge>) -> Result<Self> {
        let sum: f64 = gauges.iter().map(|g| g.weight).sum();
        if gauges.is_empty() || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::WeightSum { sum });
        }
        let mut upstream_masks = Vec::with_capacity(gauges.len());
        let mut ungauged_mask = plan.active_mask();
        for g in &gauges {
            let mask = delineate_catchment(plan, g.cell)?;
            for (u, m) in ungauged_mask.iter_mut().zip(&mask) {
                if *m {
                    *u = false;
                }
            }
            upstream_masks.push(mask);
        }
        Ok(Self {
            gauges,
            upstream_masks,
            ungauged_mask,
        })
    }

    /// Builds a set with uniform weights `1 / N_G`.
    pub fn uniform(plan: &DrainagePlan, mut gauges: Vec<Gauge>) -> Result<Self> {
        let w = 1.0 / gauges.len().max(1) as f64;
        for g in &mut gauges {
            g.weight = w;
        }
        Self::new(plan, gauges)
    }

    pub fn gauges(&self) -> &[Gauge] {
        &self.gauges
    }

    pub fn len(&self) -> usize {
        self.gauges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gauges.is_empty()
    }

    pub fn upstream_mask(&self, i: usize) -> &[bool] {
        &self.upstream_masks[i]
    }

    pub fn ungauged_mask(&self) -> &[bool] {
        &self.ungauged_mask
    }

    pub fn cells(&self) -> Vec<usize> {
        self.gauges.iter().map(|g| g.cell).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Gauge> {
        self.gauges.iter().find(|g| g.id == id)
    }

    /// Union of all gauged upstream masks.
    pub fn gauged_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ungauged_mask.len()];
        for mask in &self.upstream_masks {
            for (a, b) in m.iter_mut().zip(mask) {
                *a |= *b;
            }
        }
        m
    }

    /// Sub-set of gauges by id, reweighted uniformly.
    pub fn subset(&self, plan: &DrainagePlan, ids: &[String]) -> Result<Self> {
        let mut picked = Vec::with_capacity(ids.len());
        for id in ids {
            let g = self
                .find(id)
                .ok_or_else(|| Error::UnknownGauge(id.clone()))?;
            picked.push(g.clone());
        }
        Self::uniform(plan, picked)
    }

    /// Same gauges with observations restricted to `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let mut out = self.clone();
        for g in &mut out.gauges {
            if !g.observed.is_empty() {
                g.observed = g.observed[start..end].to_vec();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> DrainagePlan {
        // 1 x n, everything drains east to the last cell
        let mut codes = vec![Some(1u8); n];
        codes[n - 1] = Some(OUTLET);
        DrainagePlan::new(1, n, 1000.0, codes).unwrap()
    }

    fn star() -> DrainagePlan {
        // 3x3, every border cell drains to the centre
        let mut codes = vec![None; 9];
        for r in 0..3i64 {
            for c in 0..3i64 {
                let code = if (r, c) == (1, 1) {
                    OUTLET
                } else {
                    d8_code(1 - r, 1 - c).unwrap()
                };
                codes[(r * 3 + c) as usize] = Some(code);
            }
        }
        DrainagePlan::new(3, 3, 1000.0, codes).unwrap()
    }

    fn respects_edges(plan: &DrainagePlan, order: &[usize]) -> bool {
        let mut pos = vec![usize::MAX; plan.n_cells()];
        for (i, &c) in order.iter().enumerate() {
            pos[c] = i;
        }
        plan.active_cells()
            .iter()
            .all(|&c| plan.downstream(c).is_none_or(|d| pos[c] < pos[d]))
    }

    #[test]
    fn single_cell_order() {
        let plan = DrainagePlan::new(1, 1, 1.0, vec![Some(OUTLET)]).unwrap();
        assert_eq!(plan.topo_order(), &[0]);
    }

    #[test]
    fn two_cell_chain_order() {
        let plan = chain(2);
        assert_eq!(plan.topo_order(), &[0, 1]);
    }

    #[test]
    fn star_order_puts_centre_last() {
        let plan = star();
        let order = plan.topo_order();
        assert_eq!(order.len(), 9);
        assert_eq!(*order.last().unwrap(), 4);
        assert!(respects_edges(&plan, order));
        // ties resolved by cell index
        assert_eq!(&order[..8], &[0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn cycle_is_reported() {
        // two cells pointing at each other
        let codes = vec![Some(1), Some(5)];
        let err = topological_order(1, 2, &codes).unwrap_err();
        assert!(matches!(err, Error::CycleDetected { row: 0, .. }));
    }

    #[test]
    fn dangling_direction_is_reported() {
        let codes = vec![Some(OUTLET), Some(1)];
        assert!(matches!(
            topological_order(1, 2, &codes),
            Err(Error::DanglingFlowDirection { row: 0, col: 1 })
        ));
        let codes = vec![Some(1), None];
        assert!(matches!(
            topological_order(1, 2, &codes),
            Err(Error::DanglingFlowDirection { row: 0, col: 0 })
        ));
    }

    #[test]
    fn invalid_code_is_rejected() {
        let codes = vec![Some(9)];
        assert!(matches!(
            topological_order(1, 1, &codes),
            Err(Error::InvalidFlowCode { code: 9, .. })
        ));
    }

    #[test]
    fn catchment_of_outlet_is_whole_domain() {
        let plan = star();
        assert_eq!(delineate_catchment(&plan, 4).unwrap(), plan.active_mask());
    }

    #[test]
    fn headwater_catchment_is_single_cell() {
        let plan = star();
        let mask = delineate_catchment(&plan, 0).unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), 1);
        assert!(mask[0]);
    }

    #[test]
    fn mid_chain_catchment() {
        let plan = chain(5);
        // oracle: enumerate each cell's downstream path
        let mask = delineate_catchment(&plan, 3).unwrap();
        for start in 0..5 {
            let mut c = Some(start);
            let mut passes = false;
            while let Some(x) = c {
                passes |= x == 3;
                c = plan.downstream(x);
            }
            assert_eq!(mask[start], passes);
        }
        assert_eq!(mask.iter().filter(|m| **m).count(), 4);
    }

    #[test]
    fn inactive_cell_is_rejected() {
        let plan = DrainagePlan::new(1, 2, 1.0, vec![Some(OUTLET), None]).unwrap();
        assert!(matches!(
            delineate_catchment(&plan, 1),
            Err(Error::InactiveCell { row: 0, col: 1 })
        ));
    }

    #[test]
    fn normalization_rescales() {
        let plan = chain(3);
        let raw = DescriptorStack::new(
            vec!["a".into(), "b".into()],
            vec![vec![2.0, 4.0, 6.0], vec![0.0, 0.25, 1.0]],
        )
        .unwrap();
        let norm = normalize_descriptors(&plan, &raw).unwrap();
        assert_eq!(norm.maps[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(norm.maps[1], vec![0.0, 0.25, 1.0]);
        assert_eq!(norm.normalization.unwrap()[0], (2.0, 6.0));
    }

    #[test]
    fn constant_descriptor_is_rejected() {
        let plan = chain(3);
        let raw = DescriptorStack::new(vec!["flat".into()], vec![vec![10.0; 3]]).unwrap();
        assert!(matches!(
            normalize_descriptors(&plan, &raw),
            Err(Error::ConstantDescriptor { .. })
        ));
    }

    #[test]
    fn gauge_masks_partition_domain() {
        let plan = star();
        let gauges = vec![
            Gauge {
                id: "a".into(),
                cell: 0,
                weight: 0.5,
                observed: vec![],
            },
            Gauge {
                id: "b".into(),
                cell: 1,
                weight: 0.5,
                observed: vec![],
            },
        ];
        let set = GaugeSet::new(&plan, gauges).unwrap();
        let gauged = set.gauged_mask();
        for c in 0..9 {
            assert_ne!(gauged[c], set.ungauged_mask()[c]);
        }
        assert_eq!(set.ungauged_mask().iter().filter(|m| **m).count(), 7);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let plan = star();
        let gauges = vec![Gauge {
            id: "a".into(),
            cell: 4,
            weight: 0.9,
            observed: vec![],
        }];
        assert!(matches!(
            GaugeSet::new(&plan, gauges),
            Err(Error::WeightSum { .. })
        ));
    }
}
