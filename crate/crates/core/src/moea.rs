//! NSGA-II machinery: non-dominated sorting, crowding distance, elitist
//! environmental selection and Pareto-front diversity injection.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::instruction::{dominates_slice, Individual, Instruction, ObjectiveVector};

/// Partition of a population into non-domination ranks; front 0 is the
/// non-dominated set. Each front lists population indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fronts {
    pub fronts: Vec<Vec<usize>>,
}

impl Fronts {
    pub fn len(&self) -> usize {
        self.fronts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fronts.is_empty()
    }

    /// Rank of each index.
    pub fn ranks(&self, n: usize) -> Vec<usize> {
        let mut ranks = vec![usize::MAX; n];
        for (r, front) in self.fronts.iter().enumerate() {
            for &i in front {
                ranks[i] = r;
            }
        }
        ranks
    }
}

pub fn fast_nondominated_sort(objectives: &[ObjectiveVector]) -> Fronts {
    let points: Vec<[f64; 3]> = objectives.iter().map(ObjectiveVector::as_array).collect();
    fast_nondominated_sort_points(&points)
}

/// Deb's O(M N^2) sort over arbitrary-dimension points.
pub fn fast_nondominated_sort_points<P: AsRef<[f64]>>(points: &[P]) -> Fronts {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    let mut current = Vec::new();

    for p in 0..n {
        for q in (p + 1)..n {
            let (a, b) = (points[p].as_ref(), points[q].as_ref());
            if dominates_slice(a, b) {
                dominated_by[p].push(q);
                domination_count[q] += 1;
            } else if dominates_slice(b, a) {
                dominated_by[q].push(p);
                domination_count[p] += 1;
            }
        }
    }
    for (p, &count) in domination_count.iter().enumerate() {
        if count == 0 {
            current.push(p);
        }
    }

    let mut fronts = Vec::new();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    Fronts { fronts }
}

pub fn crowding_distance(front: &[ObjectiveVector]) -> Vec<f64> {
    let points: Vec<[f64; 3]> = front.iter().map(ObjectiveVector::as_array).collect();
    crowding_distance_points(&points)
}

/// Per-objective extremes get `+inf`; interior points accumulate the
/// normalized gap between their neighbours. Degenerate objectives add 0.
pub fn crowding_distance_points<P: AsRef<[f64]>>(front: &[P]) -> Vec<f64> {
    let n = front.len();
    let mut distance = vec![0.0; n];
    if n == 0 {
        return distance;
    }
    let dims = front[0].as_ref().len();
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..dims {
        let value = |i: usize| front[i].as_ref()[k];
        order.sort_by(|&a, &b| value(a).partial_cmp(&value(b)).unwrap_or(Ordering::Equal));
        let (first, last) = (order[0], order[n - 1]);
        distance[first] = f64::INFINITY;
        distance[last] = f64::INFINITY;
        let span = value(last) - value(first);
        if span <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            let (prev, mid, next) = (w[0], w[1], w[2]);
            distance[mid] += (value(next) - value(prev)) / span;
        }
    }
    distance
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub survivors: Vec<Individual>,
    /// Rank of the front that had to be cut by crowding, if any.
    pub truncated_front_index: Option<usize>,
    /// Indices into the combined pool, in survivor order.
    pub survivor_indices: Vec<usize>,
}

/// Keeps whole fronts in rank order, then fills the remaining slots from the
/// first overflowing front by descending crowding distance (ties by index).
pub fn environmental_select(combined: Vec<Individual>, m: usize) -> Result<SelectionOutcome> {
    if m == 0 {
        return Err(Error::Config("selection size must be at least 1".into()));
    }
    if combined.len() < m {
        return Err(Error::Config(format!(
            "cannot select {m} survivors from a pool of {}",
            combined.len()
        )));
    }
    let objectives = combined
        .iter()
        .map(|ind| {
            ind.objectives.ok_or_else(|| {
                Error::Argument(format!("individual {} entered selection unevaluated", ind.id()))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let fronts = fast_nondominated_sort(&objectives);
    let mut rank = vec![0usize; combined.len()];
    let mut crowding = vec![0.0f64; combined.len()];
    let mut chosen = Vec::with_capacity(m);
    let mut truncated_front_index = None;

    for (r, front) in fronts.fronts.iter().enumerate() {
        if chosen.len() == m {
            break;
        }
        let members: Vec<ObjectiveVector> = front.iter().map(|&i| objectives[i]).collect();
        let distances = crowding_distance(&members);
        for (&i, &d) in front.iter().zip(&distances) {
            rank[i] = r;
            crowding[i] = d;
        }
        let room = m - chosen.len();
        if front.len() <= room {
            chosen.extend_from_slice(front);
        } else {
            let mut by_crowding = front.clone();
            // stable sort keeps index order among equal distances
            by_crowding.sort_by(|&a, &b| {
                crowding[b].partial_cmp(&crowding[a]).unwrap_or(Ordering::Equal)
            });
            chosen.extend_from_slice(&by_crowding[..room]);
            truncated_front_index = Some(r);
        }
    }

    let mut slots: Vec<Option<Individual>> = combined.into_iter().map(Some).collect();
    let survivors = chosen
        .iter()
        .map(|&i| {
            let mut ind = slots[i].take().expect("each index chosen once");
            ind.rank = Some(rank[i]);
            ind.crowding = Some(crowding[i]);
            ind
        })
        .collect();

    Ok(SelectionOutcome {
        survivors,
        truncated_front_index,
        survivor_indices: chosen,
    })
}

/// Supplier of fresh instructions for diversity injection.
pub trait InstructionSource {
    /// `None` once the source cannot produce more.
    fn next_instruction(&mut self) -> Option<Instruction>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InjectionReport {
    /// Population positions that received a fresh individual.
    pub replaced: Vec<usize>,
    pub requested: usize,
    pub warnings: Vec<String>,
}

/// Replaces `floor(rate * |front 0|)` uniformly chosen front-0 members with
/// fresh, unevaluated individuals born in `generation`.
pub fn diversity_inject<R: Rng + ?Sized>(
    pop: &mut [Individual],
    rate: f64,
    generator: &mut dyn InstructionSource,
    generation: u32,
    rng: &mut R,
) -> Result<InjectionReport> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("injection rate {rate} outside [0, 1]")));
    }
    if pop.iter().any(|ind| ind.rank.is_none()) {
        return Err(Error::Argument(
            "diversity injection needs a sorted population".into(),
        ));
    }
    let front0: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].rank == Some(0)).collect();
    // guard against 0.29 * 100 = 28.999999999999996
    let requested = ((rate * front0.len() as f64) + 1e-9).floor() as usize;
    let mut report = InjectionReport {
        requested,
        ..Default::default()
    };
    if requested == 0 {
        return Ok(report);
    }
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, front0.len(), requested)
        .into_iter()
        .map(|k| front0[k])
        .collect();
    picks.sort_unstable();

    for pos in picks {
        match generator.next_instruction() {
            Some(instr) => {
                pop[pos] = Individual::new(instr, generation);
                report.replaced.push(pos);
            }
            None => {
                report.warnings.push(format!(
                    "instruction source exhausted after {} of {} injections",
                    report.replaced.len(),
                    requested
                ));
                break;
            }
        }
    }
    Ok(report)
}

/// Exact hypervolume dominated by `points` and bounded by `reference`
/// (minimization, three objectives). Points not strictly better than the
/// reference in every objective contribute nothing.
pub fn hypervolume_3d(points: &[[f64; 3]], reference: [f64; 3]) -> f64 {
    let mut pts: Vec<[f64; 3]> = points
        .iter()
        .copied()
        .filter(|p| (0..3).all(|k| p[k] < reference[k]))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a[2].partial_cmp(&b[2]).unwrap_or(Ordering::Equal));
    let mut volume = 0.0;
    for i in 0..pts.len() {
        let z_next = pts.get(i + 1).map_or(reference[2], |p| p[2]);
        let depth = z_next - pts[i][2];
        if depth <= 0.0 {
            continue;
        }
        let slab: Vec<[f64; 2]> = pts[..=i].iter().map(|p| [p[0], p[1]]).collect();
        volume += hypervolume_2d(&slab, [reference[0], reference[1]]) * depth;
    }
    volume
}

/// Area of the union of boxes `[p, reference]`, swept along the first axis.
fn hypervolume_2d(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap_or(Ordering::Equal));
    let mut area = 0.0;
    let mut best_y = reference[1];
    for (i, p) in pts.iter().enumerate() {
        best_y = best_y.min(p[1]);
        let x_next = pts.get(i + 1).map_or(reference[0], |q| q[0]);
        area += (x_next - p[0]) * (reference[1] - best_y);
    }
    area
}
