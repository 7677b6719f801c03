//! Semantic-embedding analysis: do observations with the same number of
//! visible teammates land close together in the teammate embedding, whatever
//! the battle size?

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::dyan::DyanParams;
use crate::env::{scripted_opponent, JointAction, Observation, Team, WorldConfig, WorldState};
use crate::learners::{EpisodeLog, LogWriter};
use crate::{Error, Result};

/// Default scenario sizes: `n v n` battles with 3, 4 and 5 agents per team.
pub const DEFAULT_SCENARIOS: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSample {
    pub embedding: Vec<f64>,
    pub semantic_label: usize,
    pub scenario_label: String,
}

/// What an observation's semantic class is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeler {
    #[default]
    VisibleTeammates,
    VisibleEnemies,
}

impl Labeler {
    pub fn label(self, obs: &Observation) -> usize {
        match self {
            Labeler::VisibleTeammates => obs.teammate_features.len(),
            Labeler::VisibleEnemies => obs.enemy_features.len(),
        }
    }
}

/// Teammate embeddings of team A observations while both teams follow the
/// scripted policy, `samples` per scenario.
pub fn collect_embeddings(
    params: &DyanParams,
    scenarios: &[usize],
    samples: usize,
    seed: u64,
    labeler: Labeler,
) -> Result<Vec<SemanticSample>> {
    if params.spec().is_vanilla() {
        return Err(Error::Checkpoint(
            "the checkpoint has no set embeddings (vanilla network)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples * scenarios.len());
    for &n in scenarios {
        let label = format!("{n}v{n}");
        let base = WorldConfig::battle(n, n);
        let mut taken = 0;
        while taken < samples {
            let mut world = WorldState::reset(&base.clone().with_seed(rng.gen()))?;
            while !world.is_done() && taken < samples {
                for id in world.alive_ids(Team::A).collect::<Vec<_>>() {
                    if taken == samples {
                        break;
                    }
                    let obs = world.observe(id)?;
                    let (embedding, _) = params.embed(&obs)?;
                    out.push(SemanticSample {
                        embedding,
                        semantic_label: labeler.label(&obs),
                        scenario_label: label.clone(),
                    });
                    taken += 1;
                }
                let mut joint = JointAction::new(world.agents.len());
                for id in (0..world.agents.len()).filter(|&i| world.agents[i].alive) {
                    joint.set(id, scripted_opponent(&world, id)?);
                }
                world.step(&joint)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                match (na == 0.0, nb == 0.0) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => 1.0,
                    _ => (1.0 - dot / (na * nb)).max(0.0),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub metric: Metric,
    pub intra: f64,
    pub inter: f64,
    /// `intra / inter`; 0 with `degenerate` set when `inter` is 0.
    pub ratio: f64,
    pub degenerate: bool,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
    pub class_counts: BTreeMap<usize, usize>,
}

/// Mean pairwise distance within and across semantic classes, pooled over
/// all pairs. Samples are put in a canonical order first, so the result does
/// not depend on input order.
pub fn distance_report(samples: &[SemanticSample], metric: Metric) -> Result<DistanceReport> {
    let mut class_counts = BTreeMap::new();
    for s in samples {
        *class_counts.entry(s.semantic_label).or_insert(0usize) += 1;
    }
    let usable = class_counts.values().filter(|&&c| c >= 2).count();
    if usable < 2 {
        return Err(Error::Analysis(format!(
            "need two classes with at least two samples each, found {usable}"
        )));
    }
    if let Some(w) = samples.first().map(|s| s.embedding.len()) {
        if samples.iter().any(|s| s.embedding.len() != w) {
            return Err(Error::Analysis("embeddings have different widths".into()));
        }
    }
    let mut sorted: Vec<&SemanticSample> = samples.iter().collect();
    sorted.sort_by(|a, b| {
        a.semantic_label.cmp(&b.semantic_label).then_with(|| {
            let ka = a.embedding.iter().map(|v| v.to_bits());
            let kb = b.embedding.iter().map(|v| v.to_bits());
            ka.cmp(kb)
        })
    });
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut n_intra, mut n_inter) = (0u64, 0u64);
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let d = metric.distance(&sorted[i].embedding, &sorted[j].embedding);
            if sorted[i].semantic_label == sorted[j].semantic_label {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    let degenerate = inter == 0.0;
    Ok(DistanceReport {
        metric,
        intra,
        inter,
        ratio: if degenerate { 0.0 } else { intra / inter },
        degenerate,
        intra_pairs: n_intra,
        inter_pairs: n_inter,
        class_counts,
    })
}

/// One row per sample: `label,scenario,e0,...`. An empty set gives a
/// header-only file.
pub fn embeddings_csv(samples: &[SemanticSample]) -> String {
    let width = samples.first().map_or(0, |s| s.embedding.len());
    let mut out = String::from("label,scenario");
    for k in 0..width {
        write!(out, ",e{k}").expect("writing to a String");
    }
    out.push('\n');
    for s in samples {
        write!(out, "{},{}", s.semantic_label, s.scenario_label).expect("writing to a String");
        for v in &s.embedding {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings(samples: &[SemanticSample], path: &Path) -> Result<()> {
    write_atomic(path, embeddings_csv(samples).as_bytes())
}

pub fn export_report(report: &DistanceReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    write_atomic(path, json.as_bytes())
}

/// Training curve in the same columns as the per-episode training log.
pub fn export_curves(logs: &[EpisodeLog], path: &Path) -> Result<()> {
    let mut out = format!("{}\n", LogWriter::HEADER);
    for l in logs {
        out.push_str(&LogWriter::row(l));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Collects embeddings over at least two scenarios, writes `embeddings.csv`
/// and `report.json` to `out` and returns the report.
pub fn analyze(
    params: &DyanParams,
    scenarios: &[usize],
    samples: usize,
    seed: u64,
    metric: Metric,
    out: &Path,
) -> Result<DistanceReport> {
    if scenarios.len() < 2 {
        return Err(Error::Analysis(format!(
            "the comparison needs at least two scenarios, got {}",
            scenarios.len()
        )));
    }
    let collected = collect_embeddings(params, scenarios, samples, seed, Labeler::default())?;
    let report = distance_report(&collected, metric)?;
    export_embeddings(&collected, &out.join("embeddings.csv"))?;
    export_report(&report, &out.join("report.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: usize, v: Vec<f64>) -> SemanticSample {
        SemanticSample {
            embedding: v,
            semantic_label: label,
            scenario_label: "3v3".into(),
        }
    }

    #[test]
    fn constructed_geometry() {
        let s = vec![
            sample(0, vec![0.0, 0.0]),
            sample(0, vec![0.0, 0.0]),
            sample(1, vec![1.0, 0.0]),
            sample(1, vec![1.0, 0.0]),
        ];
        let r = distance_report(&s, Metric::Euclidean).unwrap();
        assert_eq!((r.intra, r.inter, r.ratio), (0.0, 1.0, 0.0));
        assert!(!r.degenerate);
        assert_eq!(r.intra_pairs, 2);
        assert_eq!(r.inter_pairs, 4);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let s: Vec<_> = (0..4).map(|i| sample(i % 2, vec![0.5; 3])).collect();
        let r = distance_report(&s, Metric::Euclidean).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn too_few_classes() {
        let s = vec![sample(0, vec![0.0]), sample(0, vec![1.0]), sample(1, vec![2.0])];
        assert!(matches!(distance_report(&s, Metric::Euclidean), Err(Error::Analysis(_))));
    }

    #[test]
    fn cosine_distance() {
        assert!((Metric::Cosine.distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!(Metric::Cosine.distance(&[1.0, 1.0], &[2.0, 2.0]).abs() < 1e-12);
        assert_eq!(Metric::Cosine.distance(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn csv_shape() {
        let s: Vec<_> = (0..10).map(|i| sample(i % 3, vec![i as f64; 16])).collect();
        let csv = embeddings_csv(&s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines.iter().all(|l| l.split(',').count() == 18));
        assert_eq!(embeddings_csv(&[]), "label,scenario\n");
    }
}
