//! Ablation grids: a base configuration, axes of values to sweep, and a
//! seed list. Every cell is validated before anything runs; results land
//! in one table with per-seed rows and a mean row per cell.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::config::{set_path, ExperimentConfig, CONFIG_VERSION};
use crate::error::{Error, Result};
use crate::run::{load_data, run, LoadedData};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub spec_version: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub base: toml::Value,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

fn default_seeds() -> Vec<u64> {
    vec![13, 42, 2021]
}

pub fn parse_grid(text: &str) -> Result<GridSpec> {
    let tree: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("grid file is not valid TOML: {e}")))?;
    grid_from_value(tree)
}

/// Deserialize and sanity-check a grid tree (used after `--set` overrides).
pub fn grid_from_value(tree: toml::Value) -> Result<GridSpec> {
    let spec: GridSpec = tree
        .try_into()
        .map_err(|e| Error::Config(format!("grid file is not valid: {e}")))?;
    if spec.spec_version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "unsupported grid spec_version {:?}, this build understands {CONFIG_VERSION:?}",
            spec.spec_version
        )));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("a grid needs at least one seed".into()));
    }
    for axis in &spec.axes {
        if axis.key.is_empty() || axis.values.is_empty() {
            return Err(Error::Config(format!(
                "axis {:?} needs a key and at least one value",
                axis.key
            )));
        }
    }
    Ok(spec)
}

pub fn read_grid(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_grid(&text)
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn short_key(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

/// One fully resolved job: an axis assignment and a seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// The cartesian product of the axes (earlier axes vary slowest), crossed
/// with the seed list. Any invalid combination fails the whole expansion,
/// so nothing trains unless every cell is sound.
pub fn expand(spec: &GridSpec) -> Result<Vec<Cell>> {
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for axis in &spec.axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..axis.values.len()).map(move |i| {
                    let mut next = c.clone();
                    next.push(i);
                    next
                })
            })
            .collect();
    }

    let mut cells = Vec::with_capacity(combos.len() * spec.seeds.len());
    for combo in &combos {
        let label = spec
            .axes
            .iter()
            .zip(combo)
            .map(|(axis, &i)| format!("{}={}", short_key(&axis.key), value_label(&axis.values[i])))
            .collect::<Vec<_>>()
            .join(",");
        let label = if label.is_empty() { "base".to_string() } else { label };
        for &seed in &spec.seeds {
            let mut tree = spec.base.clone();
            for (axis, &i) in spec.axes.iter().zip(combo) {
                set_path(&mut tree, &axis.key, axis.values[i].clone())
                    .map_err(|e| Error::Config(format!("cell {label}: {e}")))?;
            }
            set_path(&mut tree, "train.seed", toml::Value::Integer(seed as i64))?;
            let config: ExperimentConfig = tree
                .try_into()
                .map_err(|e| Error::Config(format!("cell {label}: {e}")))?;
            config
                .validate()
                .map_err(|e| Error::Config(format!("cell {label}: {e}")))?;
            cells.push(Cell { label: label.clone(), seed, config });
        }
    }
    Ok(cells)
}

/// One result line: the primary score of every dataset the run produced.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub cell: String,
    /// Seed as text so mean rows can say "mean".
    pub seed: String,
    pub fingerprint: String,
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub datasets: Vec<String>,
    pub rows: Vec<GridRow>,
}

/// Run every cell sequentially, reusing loaded corpora across cells that
/// share a data section. Emits per-seed rows plus one mean row per cell.
pub fn run_grid(spec: &GridSpec, mut progress: impl FnMut(&str)) -> Result<GridOutcome> {
    let cells = expand(spec)?;
    let mut data_cache: BTreeMap<String, LoadedData> = BTreeMap::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut per_seed: Vec<GridRow> = Vec::new();

    for (i, cell) in cells.iter().enumerate() {
        progress(&format!(
            "[{}/{}] {} seed {}",
            i + 1,
            cells.len(),
            cell.label,
            cell.seed
        ));
        let key = toml::to_string(&cell.config.data).expect("data section serializes");
        if !data_cache.contains_key(&key) {
            data_cache.insert(key.clone(), load_data(&cell.config.data)?);
        }
        let data = &data_cache[&key];
        let result = run(&cell.config, data, |_| {})?;
        progress(&format!(
            "    best dev {:.4} at epoch {}",
            result.outcome.best_dev, result.outcome.best_epoch
        ));
        let scores: Vec<(String, f64)> = result
            .reports
            .iter()
            .map(|r| (r.dataset.clone(), r.report.primary()))
            .collect();
        for (name, _) in &scores {
            if !datasets.contains(name) {
                datasets.push(name.clone());
            }
        }
        per_seed.push(GridRow {
            cell: cell.label.clone(),
            seed: cell.seed.to_string(),
            fingerprint: result.fingerprint,
            scores,
        });
    }

    // mean rows, preserving first-appearance cell order
    let mut rows = Vec::new();
    let mut cell_order: Vec<String> = Vec::new();
    for row in &per_seed {
        if !cell_order.contains(&row.cell) {
            cell_order.push(row.cell.clone());
        }
    }
    for cell in &cell_order {
        let members: Vec<&GridRow> = per_seed.iter().filter(|r| &r.cell == cell).collect();
        rows.extend(members.iter().map(|r| (*r).clone()));
        let mut means = Vec::new();
        for name in &datasets {
            let vals: Vec<f64> = members
                .iter()
                .filter_map(|r| r.scores.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
                .collect();
            if !vals.is_empty() {
                means.push((name.clone(), vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        rows.push(GridRow {
            cell: cell.clone(),
            seed: "mean".to_string(),
            fingerprint: "-".to_string(),
            scores: means,
        });
    }
    Ok(GridOutcome { datasets, rows })
}

impl GridOutcome {
    pub fn mean_score(&self, cell: &str, dataset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.seed == "mean")?
            .scores
            .iter()
            .find(|(n, _)| n == dataset)
            .map(|(_, v)| *v)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell\tseed\tfingerprint");
        for d in &self.datasets {
            out.push('\t');
            out.push_str(d);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{}\t{}\t{}", row.cell, row.seed, row.fingerprint));
            for d in &self.datasets {
                let v = row.scores.iter().find(|(n, _)| n == d).map(|(_, v)| *v);
                match v {
                    Some(v) => out.push_str(&format!("\t{v:.6}")),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cell_w = self
            .rows
            .iter()
            .map(|r| r.cell.len())
            .chain(["cell".len()])
            .max()
            .unwrap();
        let col_w = self
            .datasets
            .iter()
            .map(|d| d.len().max(8))
            .collect::<Vec<_>>();
        let mut out = format!("{:cell_w$}  {:>5}", "cell", "seed");
        for (d, w) in self.datasets.iter().zip(&col_w) {
            out.push_str(&format!("  {d:>w$}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:cell_w$}  {:>5}", row.cell, row.seed));
            for (d, w) in self.datasets.iter().zip(&col_w) {
                let v = row.scores.iter().find(|(n, _)| n == d).map(|(_, v)| *v);
                match v {
                    Some(v) => out.push_str(&format!("  {v:>w$.4}")),
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_grid_reports(dir: &Path, outcome: &GridOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("grid.tsv"), outcome.to_tsv())?;
    std::fs::write(dir.join("grid.txt"), outcome.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_conll, LabeledSequence};

    fn corpus() -> Vec<LabeledSequence> {
        let mk = |t: &[&str], l: &[&str]| LabeledSequence {
            tokens: t.iter().map(|s| s.to_string()).collect(),
            labels: l.iter().map(|s| s.to_string()).collect(),
        };
        vec![
            mk(&["go", "to", "oslo"], &["O", "O", "B-CITY"]),
            mk(&["visit", "lima", "now"], &["O", "B-CITY", "O"]),
            mk(&["see", "bern"], &["O", "B-CITY"]),
            mk(&["leave", "kiev", "today"], &["O", "B-CITY", "O"]),
        ]
    }

    fn grid_text(dir: &Path) -> String {
        let data = corpus();
        let train = dir.join("train.conll");
        write_conll(&train, &data).unwrap();
        let dev = dir.join("dev.conll");
        write_conll(&dev, &data).unwrap();
        format!(
            r#"
spec_version = "1"
seeds = [1, 2]

[base]
spec_version = "1"

[base.data]
train = {train:?}
dev = {dev:?}

[base.model]
family = "ort"
d_model = 8
num_heads = 2
num_layers = 1
d_embed = 8
dropout = 0.0

[base.train]
epochs = 2
batch_size = 4

[base.eval]
noisy_ks = [1]

[[axes]]
key = "model.ff_mode"
values = ["linear", "conv1d"]

[[axes]]
key = "model.head"
values = ["crf", "softmax"]
"#
        )
    }

    #[test]
    fn expansion_is_a_validated_cartesian_product() {
        let dir = tempfile::tempdir().unwrap();
        let spec = parse_grid(&grid_text(dir.path())).unwrap();
        let cells = expand(&spec).unwrap();
        assert_eq!(cells.len(), 2 * 2 * 2, "2 axes of 2 values x 2 seeds");
        assert_eq!(cells[0].label, "ff_mode=linear,head=crf");
        assert_eq!(cells[0].seed, 1);
        assert_eq!(cells[1].seed, 2);
        assert_eq!(cells[2].label, "ff_mode=linear,head=softmax");
        assert_eq!(cells[7].label, "ff_mode=conv1d,head=softmax");
        assert_eq!(cells[7].config.train.seed, 2);
    }

    #[test]
    fn any_bad_cell_rejects_the_whole_grid() {
        let dir = tempfile::tempdir().unwrap();
        let text = grid_text(dir.path()).replace(
            "values = [\"linear\", \"conv1d\"]",
            "values = [\"linear\", \"banana\"]",
        );
        let spec = parse_grid(&text).unwrap();
        let err = expand(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("banana"), "{err}");
    }

    #[test]
    fn unknown_grid_keys_fail() {
        assert!(parse_grid("spec_version = \"1\"\nbananas = 3\n[base]\n").is_err());
        assert!(parse_grid("spec_version = \"9\"\n[base]\n").is_err());
    }

    #[test]
    fn grid_runs_and_aggregates_means() {
        let dir = tempfile::tempdir().unwrap();
        let spec = parse_grid(&grid_text(dir.path())).unwrap();
        let outcome = run_grid(&spec, |_| {}).unwrap();
        // 4 cells x (2 seeds + 1 mean row)
        assert_eq!(outcome.rows.len(), 4 * 3);
        assert_eq!(
            outcome.datasets,
            vec!["source_dev", "source_dev_k1"],
            "no test set, so noise lands on dev"
        );
        let mean = outcome
            .mean_score("ff_mode=conv1d,head=crf", "source_dev")
            .unwrap();
        let seeds: Vec<f64> = outcome
            .rows
            .iter()
            .filter(|r| r.cell == "ff_mode=conv1d,head=crf" && r.seed != "mean")
            .map(|r| r.scores[0].1)
            .collect();
        assert_eq!(seeds.len(), 2);
        assert!((mean - (seeds[0] + seeds[1]) / 2.0).abs() < 1e-12);

        let tsv = outcome.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 12);
        assert!(tsv.starts_with("cell\tseed\tfingerprint\tsource_dev\tsource_dev_k1"));
        let text = outcome.to_text();
        assert!(text.contains("mean"));
        assert_eq!(text.lines().count(), 1 + 12);
    }
}
