use fedsilo::orchestrator::{
    run_experiment, sweep_seed, ExperimentConfig, OrchestratorError, CSV_HEADER,
};

use crate::report::{columns, mean_std, mean_std_table, site_names};
use crate::CliError;

/// One `--param key=v1,v2` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_grid(specs: &[String]) -> Result<Vec<Axis>, String> {
    specs
        .iter()
        .map(|spec| {
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| format!("sweep spec `{spec}` must look like key=v1,v2"))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').any(str::is_empty) {
                return Err(format!("sweep spec `{spec}`: bad key"));
            }
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(format!("sweep spec `{spec}`: empty value"));
            }
            Ok(Axis {
                key: key.to_string(),
                values,
            })
        })
        .collect()
}

fn literal(v: &str) -> toml::Value {
    if let Ok(i) = v.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = v.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = v.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(v.to_string())
    }
}

/// Returns `cfg` with the dotted `key` set, re-parsed strictly.
pub fn apply(cfg: &ExperimentConfig, key: &str, value: &str) -> Result<ExperimentConfig, CliError> {
    let mut table: toml::Table = toml::from_str(&cfg.to_toml()).expect("config round-trips");
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = &mut table;
    for p in parts {
        node = node
            .get_mut(p)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::Config(format!("sweep key `{key}`: no table `{p}`")))?;
    }
    if !node.contains_key(last) {
        return Err(CliError::Config(format!("sweep key `{key}` is not a config field")));
    }
    let mut v = literal(value);
    // `lr=1` means the float 1.0 when the field is a float.
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (node.get(last), &v) {
        v = toml::Value::Float(*i as f64);
    }
    node.insert(last.to_string(), v);
    let out = ExperimentConfig::from_toml(&table.to_string())
        .map_err(|e| CliError::Config(format!("sweep {key}={value}: {e}")))?;
    out.validate()
        .map_err(|e| CliError::Config(format!("sweep {key}={value}: {e}")))?;
    Ok(out)
}

/// Every grid point as `(label, config)`, first axis varying slowest.
pub fn expand(cfg: &ExperimentConfig, grid: &[Axis]) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let mut points = vec![(String::new(), cfg.clone())];
    for axis in grid {
        let mut next = Vec::new();
        for (label, base) in &points {
            for v in &axis.values {
                let c = apply(base, &axis.key, v)?;
                let part = if grid.len() == 1 {
                    v.clone()
                } else {
                    format!("{}={v}", axis.key)
                };
                let label = if label.is_empty() {
                    part
                } else {
                    format!("{label};{part}")
                };
                next.push((label, c));
            }
        }
        points = next;
    }
    if grid.is_empty() {
        points[0].0 = cfg.strategy.kind.name().to_string();
    }
    Ok(points)
}

pub struct SweepResult {
    pub combined_csv: String,
    pub summary_csv: String,
    pub summary_table: String,
}

/// Runs every grid point for `seeds` derived seeds, one after another.
pub fn run_sweep(cfg: &ExperimentConfig, grid: &[Axis], seeds: usize) -> Result<SweepResult, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let points = expand(cfg, grid)?;
    let mut combined = format!("setting,seed,{CSV_HEADER}\n");
    let mut runs = Vec::new();
    for (label, point) in &points {
        let mut summaries = Vec::new();
        for k in 0..seeds {
            let run_cfg = ExperimentConfig {
                seed: sweep_seed(cfg.seed, k),
                ..point.clone()
            };
            log::info!("sweep {label} seed {k}");
            let log = run_experiment(&run_cfg).map_err(|e| match e {
                OrchestratorError::Config(c) => CliError::Config(c.to_string()),
                other => CliError::Run(other),
            })?;
            for line in log.to_csv().lines().skip(1) {
                combined += &format!("{label},{},{line}\n", run_cfg.seed);
            }
            summaries.push(log.summary());
        }
        runs.push((label.clone(), summaries));
    }
    let mut summary_csv = String::from("setting,column,mean,std,n\n");
    let mut names = site_names(cfg);
    names.push("avg".into());
    names.push("weighted_avg".into());
    for (label, summaries) in &runs {
        for (name, col) in names.iter().zip(columns(summaries)) {
            let (m, s) = mean_std(&col);
            summary_csv += &format!("{label},{name},{m},{s},{}\n", col.len());
        }
    }
    Ok(SweepResult {
        combined_csv: combined,
        summary_csv,
        summary_table: mean_std_table(cfg, &runs),
    })
}
