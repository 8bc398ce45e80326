//! Post-hoc analysis of finished runs: MI relevance tables, Kohonen-map
//! exploration density and Mann-Whitney comparisons.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::sdbc::squared_distance;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no samples")]
    EmptySamples,
    #[error("sample {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid SOM parameter: {0}")]
    InvalidSom(&'static str),
    #[error("no MI logs")]
    MissingMi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SomParams {
    pub width: usize,
    pub height: usize,
    pub epochs: usize,
    pub initial_rate: f64,
    pub final_rate: f64,
    /// Initial neighbourhood radius in grid units; defaults to half the larger side.
    pub initial_radius: Option<f64>,
    pub final_radius: f64,
}

impl Default for SomParams {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            epochs: 20,
            initial_rate: 0.5,
            final_rate: 0.01,
            initial_radius: None,
            final_radius: 0.5,
        }
    }
}

/// Trained self-organising map. Cell `i` sits at grid column `i % width`, row `i / width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    pub width: usize,
    pub height: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub params: SomParams,
    /// Mean quantisation error measured at the end of each epoch.
    pub epoch_errors: Vec<f64>,
}

impl SomGrid {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn cell_xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    /// Best-matching unit; ties go to the lowest cell index.
    pub fn bmu(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.prototypes.iter().enumerate() {
            let d = squared_distance(p, x);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn quantisation_error<V: AsRef<[f64]>>(&self, samples: &[V]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples
            .iter()
            .map(|s| {
                let s = s.as_ref();
                squared_distance(&self.prototypes[self.bmu(s)], s).sqrt()
            })
            .sum::<f64>()
            / samples.len() as f64
    }
}

fn check_samples<V: AsRef<[f64]>>(samples: &[V]) -> Result<usize, AnalysisError> {
    let dim = samples
        .first()
        .ok_or(AnalysisError::EmptySamples)?
        .as_ref()
        .len();
    for (index, s) in samples.iter().enumerate() {
        let got = s.as_ref().len();
        if got != dim {
            return Err(AnalysisError::LengthMismatch {
                index,
                expected: dim,
                got,
            });
        }
    }
    Ok(dim)
}

/// Online SOM with a Gaussian neighbourhood and exponentially decaying rate and radius.
pub fn train_som<V: AsRef<[f64]>, R: Rng + ?Sized>(
    samples: &[V],
    params: &SomParams,
    rng: &mut R,
) -> Result<SomGrid, AnalysisError> {
    let dim = check_samples(samples)?;
    if params.width == 0 || params.height == 0 {
        return Err(AnalysisError::InvalidSom("grid sides must be positive"));
    }
    if params.epochs == 0 {
        return Err(AnalysisError::InvalidSom("epochs must be positive"));
    }
    if !(params.initial_rate > 0.0
        && params.final_rate > 0.0
        && params.final_rate <= params.initial_rate)
    {
        return Err(AnalysisError::InvalidSom(
            "need 0 < final_rate <= initial_rate",
        ));
    }
    let r0 = params
        .initial_radius
        .unwrap_or(params.width.max(params.height) as f64 / 2.0)
        .max(params.final_radius);
    if !(params.final_radius > 0.0) {
        return Err(AnalysisError::InvalidSom("final_radius must be positive"));
    }

    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for s in samples {
        for ((l, h), v) in lo.iter_mut().zip(hi.iter_mut()).zip(s.as_ref()) {
            *l = l.min(*v);
            *h = h.max(*v);
        }
    }
    let cells = params.width * params.height;
    let prototypes: Vec<Vec<f64>> = (0..cells)
        .map(|_| {
            lo.iter()
                .zip(&hi)
                .map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l })
                .collect()
        })
        .collect();
    let mut grid = SomGrid {
        width: params.width,
        height: params.height,
        prototypes,
        params: params.clone(),
        epoch_errors: Vec::with_capacity(params.epochs),
    };

    let total = (params.epochs * samples.len()) as f64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for &i in &order {
            let frac = step as f64 / total;
            let rate = params.initial_rate * (params.final_rate / params.initial_rate).powf(frac);
            let radius = r0 * (params.final_radius / r0).powf(frac);
            let x = samples[i].as_ref();
            let (bx, by) = grid.cell_xy(grid.bmu(x));
            for c in 0..cells {
                let (cx, cy) = grid.cell_xy(c);
                let d2 = (cx as f64 - bx as f64).powi(2) + (cy as f64 - by as f64).powi(2);
                let h = (-d2 / (2.0 * radius * radius)).exp();
                if h < 1e-6 {
                    continue;
                }
                for (p, v) in grid.prototypes[c].iter_mut().zip(x) {
                    *p += rate * h * (v - *p);
                }
            }
            step += 1;
        }
        let err = grid.quantisation_error(samples);
        grid.epoch_errors.push(err);
    }
    Ok(grid)
}

/// Per-method sample counts for every map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub methods: Vec<String>,
    /// `counts[m][cell]`
    pub counts: Vec<Vec<usize>>,
    /// Mean fitness of all samples mapped to each cell, over all methods.
    pub mean_fitness: Vec<Option<f64>>,
    /// Cell with the highest mean fitness.
    pub best_cell: Option<usize>,
}

impl DensityMap {
    pub fn non_empty_cells(&self, method: usize) -> usize {
        self.counts[method].iter().filter(|&&c| c > 0).count()
    }

    /// Smallest fraction of cells that together hold at least `share` of the method's samples.
    pub fn concentration(&self, method: usize, share: f64) -> f64 {
        let mut counts = self.counts[method].clone();
        let total: usize = counts.iter().sum();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let need = share * total as f64;
        let mut acc = 0usize;
        for (i, c) in counts.iter().enumerate() {
            acc += c;
            if acc as f64 >= need {
                return (i + 1) as f64 / counts.len() as f64;
            }
        }
        1.0
    }

    /// RFC 4180 table: `cell,x,y,method,count,mean_fitness,best`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,x,y,method,count,mean_fitness,best\n");
        for (m, name) in self.methods.iter().enumerate() {
            for cell in 0..self.width * self.height {
                let mean = self.mean_fitness[cell].map_or(String::new(), |f| f.to_string());
                let _ = writeln!(
                    out,
                    "{cell},{},{},{name},{},{mean},{}",
                    cell % self.width,
                    cell / self.width,
                    self.counts[m][cell],
                    u8::from(self.best_cell == Some(cell)),
                );
            }
        }
        out
    }

    /// Heat map for one method: circle area proportional to the cell's count,
    /// the best-fitness cell outlined.
    pub fn to_svg(&self, method: usize) -> String {
        const CELL: f64 = 40.0;
        let w = self.width as f64 * CELL;
        let h = self.height as f64 * CELL + 24.0;
        let max = self.counts[method]
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            out,
            r#"<text x="4" y="16" font-family="sans-serif" font-size="13">{}</text>"#,
            self.methods[method]
        );
        for cell in 0..self.width * self.height {
            let (cx, cy) = (cell % self.width, cell / self.width);
            let x = cx as f64 * CELL;
            let y = 24.0 + cy as f64 * CELL;
            let stroke = if self.best_cell == Some(cell) {
                "#c00"
            } else {
                "#ccc"
            };
            let sw = if self.best_cell == Some(cell) { 2 } else { 1 };
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="{stroke}" stroke-width="{sw}"/>"#
            );
            let count = self.counts[method][cell];
            if count > 0 {
                let r = (CELL / 2.0 - 2.0) * (count as f64 / max).sqrt();
                let _ = writeln!(
                    out,
                    r##"<circle cx="{}" cy="{}" r="{r:.3}" fill="#1f5fa8"><title>{count}</title></circle>"##,
                    x + CELL / 2.0,
                    y + CELL / 2.0
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Maps every method's samples (characterisation, fitness) onto the trained grid.
pub fn exploration_density(
    map: &SomGrid,
    samples_by_method: &[(String, Vec<(Vec<f64>, f64)>)],
) -> DensityMap {
    let cells = map.cells();
    let mut counts = vec![vec![0usize; cells]; samples_by_method.len()];
    let mut fit_sum = vec![0.0; cells];
    let mut fit_n = vec![0usize; cells];
    for (m, (_, samples)) in samples_by_method.iter().enumerate() {
        for (x, f) in samples {
            let c = map.bmu(x);
            counts[m][c] += 1;
            fit_sum[c] += f;
            fit_n[c] += 1;
        }
    }
    let mean_fitness: Vec<Option<f64>> = fit_sum
        .iter()
        .zip(&fit_n)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    let best_cell = mean_fitness
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.map(|f| (i, f)))
        .fold(None, |best: Option<(usize, f64)>, (i, f)| match best {
            Some((_, bf)) if bf >= f => best,
            _ => Some((i, f)),
        })
        .map(|(i, _)| i);
    DensityMap {
        width: map.width,
        height: map.height,
        methods: samples_by_method.iter().map(|(n, _)| n.clone()).collect(),
        counts,
        mean_fitness,
        best_cell,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub feature: String,
    pub mean: f64,
    pub sd: f64,
}

/// `runs[r][g]` is the MI vector logged at generation `g` of run `r`. Each
/// run is first averaged over its generations; the table reports the mean
/// and population standard deviation of those run averages, sorted by mean
/// descending (ties by name).
pub fn mi_relevance_table(
    names: &[String],
    runs: &[Vec<Vec<f64>>],
) -> Result<Vec<MiRow>, AnalysisError> {
    let per_run: Vec<Vec<f64>> = runs
        .iter()
        .filter(|r| !r.is_empty())
        .map(|gens| {
            let mut mean = vec![0.0; names.len()];
            for (index, mi) in gens.iter().enumerate() {
                if mi.len() != names.len() {
                    return Err(AnalysisError::LengthMismatch {
                        index,
                        expected: names.len(),
                        got: mi.len(),
                    });
                }
                for (m, v) in mean.iter_mut().zip(mi) {
                    *m += v / gens.len() as f64;
                }
            }
            Ok(mean)
        })
        .collect::<Result<_, _>>()?;
    if per_run.is_empty() {
        return Err(AnalysisError::MissingMi);
    }
    let n = per_run.len() as f64;
    let mut rows: Vec<MiRow> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mean = per_run.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = per_run.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            MiRow {
                feature: name.clone(),
                mean,
                sd: var.sqrt(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean
            .total_cmp(&a.mean)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs where it is larger, ties counting half.
    pub u: f64,
    pub p_two_sided: f64,
    /// One-sided p for the alternative that the first sample tends to be larger.
    pub p_greater: f64,
    /// One-sided p for the alternative that the first sample tends to be smaller.
    pub p_less: f64,
    pub exact: bool,
}

const EXACT_LIMIT: usize = 8;

fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney U test. Exact permutation distribution (over pooled midranks)
/// when both samples have at most 8 values, otherwise the normal approximation
/// with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let u = ranks[..n1].iter().sum::<f64>() - offset;
    let mean = (n1 * n2) as f64 / 2.0;

    if n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        let n = n1 + n2;
        let (mut total, mut ge, mut le, mut extreme) = (0u64, 0u64, 0u64, 0u64);
        let eps = 1e-9;
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let rs: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            let uu = rs - offset;
            total += 1;
            ge += u64::from(uu >= u - eps);
            le += u64::from(uu <= u + eps);
            extreme += u64::from((uu - mean).abs() >= (u - mean).abs() - eps);
        }
        let t = total as f64;
        return Ok(MannWhitney {
            u,
            p_two_sided: extreme as f64 / t,
            p_greater: ge as f64 / t,
            p_less: le as f64 / t,
            exact: true,
        });
    }

    let n = (n1 + n2) as f64;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney {
            u,
            p_two_sided: 1.0,
            p_greater: 1.0,
            p_less: 1.0,
            exact: false,
        });
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let upper = |z: f64| 1.0 - normal.cdf(z);
    let p_greater = upper((u - mean - 0.5) / sd).min(1.0);
    let p_less = normal.cdf((u - mean + 0.5) / sd).min(1.0);
    let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
    Ok(MannWhitney {
        u,
        p_two_sided: (2.0 * upper(z)).min(1.0),
        p_greater,
        p_less,
        exact: false,
    })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    })
}
