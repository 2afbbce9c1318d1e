//! Routing and depth-attention telemetry, and the usage statistics computed
//! from it: depth/expert conditionals, depth-generalization ordering, Lorenz
//! curves, Gini coefficients and the average depth-attention map.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingEvent {
    pub router: String,
    pub depth: usize,
    pub sequence: usize,
    pub position: usize,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Post-softmax depth-attention weights of one token at one query depth,
/// averaged over heads; `scores[j]` is the weight on key depth `j <= depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaScoreRow {
    pub depth: usize,
    pub sequence: usize,
    pub position: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TelemetryRecord {
    Routing(RoutingEvent),
    DaScores(DaScoreRow),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TelemetryLog {
    pub routing: Vec<RoutingEvent>,
    pub da_rows: Vec<DaScoreRow>,
}

impl TelemetryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.routing.is_empty() && self.da_rows.is_empty()
    }

    /// Usage counts `[depth, expert]` of every router whose name ends with
    /// `suffix` (e.g. `".ea"`).
    pub fn usage(&self, suffix: &str, depth: usize, experts: usize) -> Result<UsageMatrix> {
        let mut m = UsageMatrix::zeros(depth, experts);
        for ev in self.routing.iter().filter(|e| e.router.ends_with(suffix)) {
            for &e in &ev.experts {
                if ev.depth >= depth || e >= experts {
                    return Err(Error::Input(format!(
                        "routing event at depth {} expert {} outside {}x{}",
                        ev.depth, e, depth, experts
                    )));
                }
                m.counts[ev.depth * experts + e] += 1;
            }
        }
        Ok(m)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for ev in &self.routing {
            serde_json::to_writer(&mut w, &TelemetryRecord::Routing(ev.clone())).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        for row in &self.da_rows {
            serde_json::to_writer(&mut w, &TelemetryRecord::DaScores(row.clone())).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut log = Self::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TelemetryRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
            match rec {
                TelemetryRecord::Routing(e) => log.routing.push(e),
                TelemetryRecord::DaScores(r) => log.da_rows.push(r),
            }
        }
        Ok(log)
    }
}

/// Joint usage counts, row-major `[depth, expert]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageMatrix {
    pub depth: usize,
    pub experts: usize,
    pub counts: Vec<u64>,
}

impl UsageMatrix {
    pub fn zeros(depth: usize, experts: usize) -> Self {
        Self {
            depth,
            experts,
            counts: vec![0; depth * experts],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let experts = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != experts) {
            return Err(Error::Input("ragged usage matrix".into()));
        }
        Ok(Self {
            depth: rows.len(),
            experts,
            counts: rows.concat(),
        })
    }

    pub fn at(&self, depth: usize, expert: usize) -> u64 {
        self.counts[depth * self.experts + expert]
    }

    pub fn row(&self, depth: usize) -> &[u64] {
        &self.counts[depth * self.experts..(depth + 1) * self.experts]
    }

    /// Usage summed over depths.
    pub fn expert_totals(&self) -> Vec<u64> {
        (0..self.experts)
            .map(|e| (0..self.depth).map(|l| self.at(l, e)).sum())
            .collect()
    }
}

/// Conditional distributions; `None` marks an expert (or depth) with no usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditionals {
    /// `[expert][depth]`
    pub depth_given_expert: Vec<Option<Vec<f64>>>,
    /// `[depth][expert]`
    pub expert_given_depth: Vec<Option<Vec<f64>>>,
}

fn normalized(v: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = v.iter().sum();
    if total == 0 {
        None
    } else {
        Some(v.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

pub fn joint_to_conditionals(m: &UsageMatrix) -> Conditionals {
    let depth_given_expert = (0..m.experts)
        .map(|e| normalized(&(0..m.depth).map(|l| m.at(l, e)).collect::<Vec<_>>()))
        .collect();
    let expert_given_depth = (0..m.depth).map(|l| normalized(m.row(l))).collect();
    Conditionals {
        depth_given_expert,
        expert_given_depth,
    }
}

pub const GENERALIZATION_MASS: f64 = 0.9;

/// Shortest prefix of the descending-sorted distribution whose mass reaches
/// `mass`.
pub fn support_size(dist: &[f64], mass: f64) -> usize {
    let mut sorted = dist.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, p) in sorted.iter().enumerate() {
        acc += p;
        // tolerate round-off in sums that should hit the threshold exactly
        if acc >= mass - 1e-12 {
            return i + 1;
        }
    }
    sorted.len()
}

/// Smallest depth whose cumulative probability reaches one half.
pub fn median_depth(dist: &[f64]) -> usize {
    let mut acc = 0.0;
    for (l, p) in dist.iter().enumerate() {
        acc += p;
        if acc >= 0.5 - 1e-12 {
            return l;
        }
    }
    dist.len().saturating_sub(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOrder {
    /// Expert ids, most depth-specialized first.
    pub order: Vec<usize>,
    /// Support size per expert id; `None` for unused experts.
    pub support: Vec<Option<usize>>,
}

/// Groups experts by support size ascending, then by median depth, then id.
/// Unused experts go last.
pub fn generalization_order(depth_given_expert: &[Option<Vec<f64>>]) -> ExpertOrder {
    let support: Vec<Option<usize>> = depth_given_expert
        .iter()
        .map(|d| d.as_ref().map(|d| support_size(d, GENERALIZATION_MASS)))
        .collect();
    let key = |e: usize| match (&depth_given_expert[e], support[e]) {
        (Some(d), Some(s)) => (0, s, median_depth(d), e),
        _ => (1, usize::MAX, usize::MAX, e),
    };
    let mut order: Vec<usize> = (0..depth_given_expert.len()).collect();
    order.sort_by_key(|&e| key(e));
    ExpertOrder { order, support }
}

/// Lorenz points `(share of experts, share of activations)` with experts in
/// descending usage order, from `(0, 0)` to `(1, 1)`.
pub fn lorenz(counts: &[u64]) -> Result<Vec<(f64, f64)>> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::EmptyData("lorenz curve of all-zero counts".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| b.cmp(a));
    let e = sorted.len() as f64;
    let mut pts = Vec::with_capacity(sorted.len() + 1);
    pts.push((0.0, 0.0));
    let mut acc = 0u64;
    for (i, c) in sorted.iter().enumerate() {
        acc += c;
        pts.push(((i + 1) as f64 / e, acc as f64 / total as f64));
    }
    Ok(pts)
}

/// `sum_ij |n_i - n_j| / (2 E sum n)`, evaluated in `O(E log E)` via the sorted
/// form `sum_i (2i - E + 1) n_(i)`.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::EmptyData("gini of all-zero counts".into()));
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let e = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &n)| (2.0 * i as f64 - e + 1.0) * n)
        .sum();
    Ok(2.0 * weighted / (2.0 * e * total as f64))
}

/// Mean DA weight from query depth `l` to key depth `j <= l`, each row scaled
/// by its maximum. Entries with `j > l` are `None`.
pub fn da_score_map(log: &TelemetryLog, depth: usize) -> Result<Vec<Vec<Option<f64>>>> {
    if log.da_rows.is_empty() {
        return Err(Error::EmptyData("no depth-attention rows recorded".into()));
    }
    let mut sums = vec![vec![0.0; depth]; depth];
    let mut n = vec![0usize; depth];
    for row in &log.da_rows {
        if row.depth >= depth || row.scores.len() != row.depth + 1 {
            return Err(Error::Input(format!(
                "DA row at depth {} with {} scores (max depth {})",
                row.depth,
                row.scores.len(),
                depth
            )));
        }
        for (j, s) in row.scores.iter().enumerate() {
            sums[row.depth][j] += s;
        }
        n[row.depth] += 1;
    }
    Ok((0..depth)
        .map(|l| {
            if n[l] == 0 {
                return vec![None; depth];
            }
            let means: Vec<f64> = sums[l][..=l].iter().map(|s| s / n[l] as f64).collect();
            let max = means.iter().cloned().fold(0.0, f64::max);
            (0..depth)
                .map(|j| {
                    if j > l {
                        None
                    } else if max > 0.0 {
                        Some(means[j] / max)
                    } else {
                        Some(0.0)
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniqueExpertProfile {
    pub unique: Vec<usize>,
    pub ratio_to_baseline: Option<Vec<f64>>,
}

pub fn depth_unique_expert_profile(m: &UsageMatrix, baseline: Option<&[usize]>) -> UniqueExpertProfile {
    let unique: Vec<usize> = (0..m.depth)
        .map(|l| m.row(l).iter().filter(|&&c| c > 0).count())
        .collect();
    let ratio_to_baseline = baseline.map(|b| {
        unique
            .iter()
            .zip(b)
            .map(|(&u, &v)| if v == 0 { f64::INFINITY } else { u as f64 / v as f64 })
            .collect()
    });
    UniqueExpertProfile {
        unique,
        ratio_to_baseline,
    }
}

fn write_matrix(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header)?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{}", x)).unwrap_or_default()
}

#[derive(Clone, Debug, Serialize)]
pub struct RouterSummary {
    pub router: String,
    pub gini: Option<f64>,
    pub gini_per_depth: Vec<Option<f64>>,
    pub unique_experts_per_depth: Vec<usize>,
    /// `histogram[s]` = number of experts with support size `s`.
    pub support_histogram: Vec<usize>,
    pub unused_experts: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub depth: usize,
    pub routing_events: usize,
    pub da_rows: usize,
    pub routers: Vec<RouterSummary>,
}

/// Writes the CSV matrices and `summary.json` for one router family (`suffix`
/// selects routers by name, e.g. `".ea"`) into `out`.
pub fn write_report(log: &TelemetryLog, depth: usize, routers: &[(String, usize)], out: &Path) -> Result<AnalysisSummary> {
    fs::create_dir_all(out)?;
    let mut summaries = Vec::new();
    for (suffix, experts) in routers {
        let tag = suffix.trim_start_matches('.');
        let usage = log.usage(suffix, depth, *experts)?;
        let cond = joint_to_conditionals(&usage);
        let order = generalization_order(&cond.depth_given_expert);

        let depth_header = (0..depth).map(|l| format!("depth_{}", l)).collect::<Vec<_>>().join(",");
        let rows: Vec<Vec<String>> = order
            .order
            .iter()
            .map(|&e| {
                let mut r = vec![e.to_string(), order.support[e].map(|s| s.to_string()).unwrap_or_default()];
                r.extend((0..depth).map(|l| fmt_opt(cond.depth_given_expert[e].as_ref().map(|d| d[l]))));
                r
            })
            .collect();
        write_matrix(
            &out.join(format!("{}_depth_given_expert.csv", tag)),
            &format!("expert,support,{}", depth_header),
            &rows,
        )?;

        let expert_header = order.order.iter().map(|e| format!("expert_{}", e)).collect::<Vec<_>>().join(",");
        let rows: Vec<Vec<String>> = (0..depth)
            .map(|l| {
                let mut r = vec![l.to_string()];
                r.extend(order.order.iter().map(|&e| fmt_opt(cond.expert_given_depth[l].as_ref().map(|d| d[e]))));
                r
            })
            .collect();
        write_matrix(
            &out.join(format!("{}_expert_given_depth.csv", tag)),
            &format!("depth,{}", expert_header),
            &rows,
        )?;

        let mut rows = Vec::new();
        let global = usage.expert_totals();
        if let Ok(pts) = lorenz(&global) {
            rows.extend(pts.iter().map(|(x, y)| vec!["global".into(), x.to_string(), y.to_string()]));
        }
        let mut gini_per_depth = Vec::new();
        for l in 0..depth {
            if let Ok(pts) = lorenz(usage.row(l)) {
                rows.extend(pts.iter().map(|(x, y)| vec![l.to_string(), x.to_string(), y.to_string()]));
            }
            gini_per_depth.push(gini(usage.row(l)).ok());
        }
        write_matrix(
            &out.join(format!("{}_lorenz.csv", tag)),
            "scope,expert_share,activation_share",
            &rows,
        )?;

        let mut hist = vec![0usize; depth + 1];
        for s in order.support.iter().flatten() {
            hist[*s] += 1;
        }
        summaries.push(RouterSummary {
            router: tag.to_string(),
            gini: gini(&global).ok(),
            gini_per_depth,
            unique_experts_per_depth: depth_unique_expert_profile(&usage, None).unique,
            support_histogram: hist,
            unused_experts: order.support.iter().filter(|s| s.is_none()).count(),
        });
    }

    let header = (0..depth).map(|l| format!("key_depth_{}", l)).collect::<Vec<_>>().join(",");
    let rows: Vec<Vec<String>> = match da_score_map(log, depth) {
        Ok(map) => map
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let mut row = vec![l.to_string()];
                row.extend(r.iter().map(|v| fmt_opt(*v)));
                row
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    write_matrix(&out.join("da_score_map.csv"), &format!("query_depth,{}", header), &rows)?;

    let summary = AnalysisSummary {
        depth,
        routing_events: log.routing.len(),
        da_rows: log.da_rows.len(),
        routers: summaries,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("summary.json"), text)?;
    Ok(summary)
}
