//! Novelty scoring over population plus archive, archive maintenance, and the
//! fitness/novelty Pareto ranking.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sdbc::squared_distance;

pub const DEFAULT_K: usize = 15;
pub const DEFAULT_ARCHIVE_RATE: f64 = 0.025;

#[derive(Debug, Error)]
pub enum NoveltyError {
    #[error("no neighbours to score against")]
    EmptyPool,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("archive checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredIndividual {
    pub id: u64,
    pub fitness: f64,
    pub characterisation: Vec<f64>,
    pub novelty: f64,
}

/// Mean distance from `target` to its `k` nearest neighbours among the other
/// population members and the archive. Clones of the target count; the target
/// itself (same id) does not.
pub fn novelty_score(
    target: &ScoredIndividual,
    population: &[ScoredIndividual],
    archive_view: &[Vec<f64>],
    k: usize,
) -> Result<f64, NoveltyError> {
    if k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    let mut dists: Vec<f64> = population
        .iter()
        .filter(|p| p.id != target.id)
        .map(|p| &p.characterisation)
        .chain(archive_view)
        .map(|c| squared_distance(&target.characterisation, c).sqrt())
        .collect();
    if dists.is_empty() {
        return Err(NoveltyError::EmptyPool);
    }
    let k = k.min(dists.len());
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    }
    let nearest = &mut dists[..k];
    nearest.sort_unstable_by(f64::total_cmp);
    Ok(nearest.iter().sum::<f64>() / k as f64)
}

/// Scores every individual in place against the same frozen population and archive.
pub fn score_population(
    population: &mut [ScoredIndividual],
    archive_view: &[Vec<f64>],
    k: usize,
) -> Result<(), NoveltyError> {
    let scores = population
        .iter()
        .map(|ind| novelty_score(ind, population, archive_view, k))
        .collect::<Result<Vec<_>, _>>()?;
    for (ind, s) in population.iter_mut().zip(scores) {
        ind.novelty = s;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub raw: Vec<f64>,
    pub generation: usize,
}

/// Raw characterisations of past individuals. Transformed views are rebuilt
/// every generation with the current coefficients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoveltyArchive {
    pub entries: Vec<ArchiveEntry>,
}

impl NoveltyArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maps every stored raw characterisation through `transform`.
    pub fn view<F>(&self, mut transform: F) -> Vec<Vec<f64>>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        self.entries.iter().map(|e| transform(&e.raw)).collect()
    }

    /// CSV checkpoint: `generation,v0,v1,...` per entry.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), NoveltyError> {
        for e in &self.entries {
            write!(out, "{}", e.generation)?;
            for v in &e.raw {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, NoveltyError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| NoveltyError::Checkpoint {
                line: i + 1,
                reason,
            };
            let mut fields = line.split(',');
            let generation = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|e| bad(format!("generation: {e}")))?;
            let raw = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            entries.push(ArchiveEntry { raw, generation });
        }
        Ok(Self { entries })
    }
}

/// Appends each individual's raw characterisation independently with probability `rate`.
pub fn update_archive<'a, R, I>(
    archive: &mut NoveltyArchive,
    raw_population: I,
    generation: usize,
    rng: &mut R,
    rate: f64,
) where
    R: Rng + ?Sized,
    I: IntoIterator<Item = &'a [f64]>,
{
    for raw in raw_population {
        if rate > 0.0 && rng.gen::<f64>() < rate {
            archive.entries.push(ArchiveEntry {
                raw: raw.to_vec(),
                generation,
            });
        }
    }
}

/// `a` Pareto-dominates `b` with both objectives maximised.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Fast non-dominated sort. Fronts hold indices in ascending order.
pub fn non_dominated_sort(points: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    let mut current = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if dominates(points[i], points[j]) {
                dominated_by[i].push(j);
            } else if dominates(points[j], points[i]) {
                domination_count[i] += 1;
            }
        }
        if domination_count[i] == 0 {
            current.push(i);
        }
    }
    let mut fronts = Vec::new();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of one front.
pub fn crowding_distance(front: &[(f64, f64)]) -> Vec<f64> {
    let n = front.len();
    let mut out = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [fn(&(f64, f64)) -> f64; 2] = [|p| p.0, |p| p.1];
    let mut order: Vec<usize> = (0..n).collect();
    for obj in objectives {
        order.sort_by(|&a, &b| obj(&front[a]).total_cmp(&obj(&front[b])).then(a.cmp(&b)));
        let lo = obj(&front[order[0]]);
        let hi = obj(&front[order[n - 1]]);
        out[order[0]] = f64::INFINITY;
        out[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            let gap = obj(&front[order[w + 1]]) - obj(&front[order[w - 1]]);
            out[order[w]] += gap / range;
        }
    }
    out
}

/// Total order: ascending front, descending crowding distance, ascending id.
pub fn rank_population(individuals: &[ScoredIndividual]) -> Vec<usize> {
    let points: Vec<(f64, f64)> = individuals.iter().map(|i| (i.fitness, i.novelty)).collect();
    let mut key = vec![(0usize, 0.0f64); individuals.len()];
    for (f, mut front) in non_dominated_sort(&points).into_iter().enumerate() {
        // boundary ties inside crowding_distance resolve by position, so fix it by id
        front.sort_by_key(|&i| individuals[i].id);
        let members: Vec<(f64, f64)> = front.iter().map(|&i| points[i]).collect();
        for (&i, cd) in front.iter().zip(crowding_distance(&members)) {
            key[i] = (f, cd);
        }
    }
    let mut order: Vec<usize> = (0..individuals.len()).collect();
    order.sort_by(|&a, &b| {
        key[a]
            .0
            .cmp(&key[b].0)
            .then_with(|| key[b].1.total_cmp(&key[a].1))
            .then_with(|| individuals[a].id.cmp(&individuals[b].id))
    });
    order
}

/// Fitness-only order: descending fitness, ascending id.
pub fn rank_by_fitness(individuals: &[ScoredIndividual]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..individuals.len()).collect();
    order.sort_by(|&a, &b| {
        individuals[b]
            .fitness
            .partial_cmp(&individuals[a].fitness)
            .unwrap_or(Ordering::Equal)
            .then_with(|| individuals[a].id.cmp(&individuals[b].id))
    });
    order
}
