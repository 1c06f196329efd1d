//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::panic;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedsilo::data::{generate_benchmark_site, make_benchmark, PartitionMode, SkeletonFile};
use fedsilo::model::{Model, ModelSpec, NormState, SkeletonSequence};
use fedsilo::netproto::{
    decode_message, encode_message, join, params_len, read_frame, serve_on, write_message,
    JoinOptions, Message, NetError, STALE_ROUND,
};
use fedsilo::orchestrator::{
    initial_global, run_experiment, run_traced, sweep_seed, warmup_lr, ClientRuntime,
    ExperimentConfig, MetricsLog,
};
use fedsilo::params::{filter_merge, Entry, LayerTag, ParameterSet};
use fedsilo::strategies::{
    aggregate_fedavg, apfl_mix, local_train_fedprox, local_train_partitioned, AlphaMode,
    ClientState, LocalHyper, StrategyKind, UploadPayload,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient exactness", gradient_exactness),
        (2, "aggregation algebra", aggregation_algebra),
        (3, "strategy equivalences", strategy_equivalences),
        (4, "mixing degeneracies and alpha clipping", mixing_degeneracies),
        (5, "alpha dynamics", alpha_dynamics),
        (6, "accuracy ordering", accuracy_ordering),
        (7, "FedBN/FedPer structure", partition_structure),
        (8, "cross-mode equivalence", cross_mode_equivalence),
        (9, "protocol robustness", protocol_robustness),
        (10, "data residency", data_residency),
        (11, "warmup schedule", warmup_schedule),
    ];
    let selected: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag}  {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn same_bits(a: &ParameterSet, b: &ParameterSet) -> bool {
    a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| {
            x.name == y.name
                && x.values.len() == y.values.len()
                && x.values.iter().zip(&y.values).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

fn entry_bits_equal(a: &Entry, b: &Entry) -> bool {
    a.values.iter().zip(&b.values).all(|(u, v)| u.to_bits() == v.to_bits())
}

/// Default benchmark with fewer rounds; used where a property, not accuracy, is checked.
fn short(kind: StrategyKind, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.rounds = rounds;
    c.personalization_delay = 2;
    c.strategy.kind = kind;
    c
}

/// Small model and data for network tests.
fn tiny(kind: StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.rounds = 3;
    c.warmup_rounds = 1;
    c.personalization_delay = 1;
    c.batch_size = 8;
    c.strategy.kind = kind;
    c.model.frames = 8;
    c.model.joints = 6;
    c.model.dct_coeffs = 4;
    c.model.hidden = vec![12, 8];
    c.data.frames = 8;
    c.data.joints = 6;
    c.data.site_samples = vec![30, 25, 20];
    c.network.join_timeout_secs = 30;
    c.network.io_timeout_secs = 120;
    c.network.retry_delay_ms = 50;
    c
}

fn hyper(cfg: &ExperimentConfig, round: u32) -> LocalHyper {
    LocalHyper {
        sgd: cfg.sgd(warmup_lr(round as usize, cfg)),
        batch_size: cfg.batch_size,
        local_epochs: cfg.local_epochs,
        round,
        seed: cfg.seed,
        personalize: round as usize >= cfg.personalization_delay,
    }
}

fn gradient_exactness() -> Outcome {
    let spec = ModelSpec {
        frames: 4,
        joints: 2,
        classes: 3,
        dct_coeffs: 4,
        hidden: vec![5],
        ..ModelSpec::default()
    };
    let model = Model::new(spec.clone()).map_err(|e| e.to_string())?;
    let (p, norm) = model.init(11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = p.map(|e, v| {
        if e.name.contains("running") {
            v
        } else {
            v + rng.random_range(-0.2..0.2)
        }
    });
    let batch: Vec<SkeletonSequence> = (0..6)
        .map(|i| SkeletonSequence {
            id: i,
            frames: spec.frames,
            joints: spec.joints,
            coords: (0..spec.frames * spec.joints * 3)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: i as usize % spec.classes,
            theme: 0,
        })
        .collect();
    let loss_at = |q: &ParameterSet| model.loss_and_grad(q, &mut norm.clone(), &batch).unwrap();
    let (_, grads) = loss_at(&p);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for e in p.entries() {
        if e.name.contains("running") {
            continue;
        }
        let g = grads.values(&e.name).map_err(|e| e.to_string())?;
        for i in 0..e.values.len() {
            let mut plus = e.values.clone();
            plus[i] += h;
            let mut minus = e.values.clone();
            minus[i] -= h;
            let fd = (loss_at(&p.with_values(&e.name, plus).unwrap()).0
                - loss_at(&p.with_values(&e.name, minus).unwrap()).0)
                / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            ensure!(rel <= 1e-4, "{}[{i}]: analytic {} vs numeric {fd}, rel {rel:.2e}", e.name, g[i]);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(format!("{checked} coordinates, max rel err {worst:.2e}"))
}

fn scalar(v: f64) -> ParameterSet {
    ParameterSet::from_entries(vec![Entry::new("x", LayerTag::Base, vec![1], vec![v]).unwrap()])
        .unwrap()
}

fn upload(client_id: u32, n_i: u32, delta: ParameterSet) -> UploadPayload {
    UploadPayload {
        client_id,
        n_i,
        round: 0,
        delta,
    }
}

fn aggregation_algebra() -> Outcome {
    let cases: [(f64, [u32; 3], [f64; 3], f64); 3] = [
        (0.0, [2, 1, 1], [4.0, 0.0, -4.0], 1.0),
        (10.0, [1, 1, 2], [1.0, 2.0, 3.0], 12.25),
        (-1.0, [3, 3, 3], [0.5, -0.5, 1.5], -0.5),
    ];
    for (w, n, d, want) in cases {
        let payloads: Vec<_> = (0..3).map(|i| upload(i as u32, n[i], scalar(d[i]))).collect();
        let got = aggregate_fedavg(&scalar(w), &payloads).map_err(|e| e.to_string())?;
        let got = got.values("x").unwrap()[0];
        ensure!(got == want, "w={w} n={n:?} d={d:?}: got {got}, want {want}");
    }
    let w = initial_global(&ExperimentConfig::default());
    let zeros: Vec<_> = (0..3).map(|i| upload(i, 100 + 7 * i, w.zeros_like())).collect();
    let next = aggregate_fedavg(&w, &zeros).map_err(|e| e.to_string())?;
    ensure!(same_bits(&next, &w), "zero deltas moved the global model");
    Ok(format!("{} hand cases, zero-delta fixed point over {} values", cases.len(), w.num_values()))
}

fn strategy_equivalences() -> Outcome {
    let rounds = 6;
    let (_, fedavg) = run_traced(&short(StrategyKind::FedAvg, rounds)).map_err(|e| e.to_string())?;

    let mut prox = short(StrategyKind::FedProx, rounds);
    prox.strategy.mu = 0.0;
    let (_, t) = run_traced(&prox).map_err(|e| e.to_string())?;
    for (r, (a, b)) in t.iter().zip(&fedavg).enumerate() {
        ensure!(same_bits(a, b), "FedProx(mu=0) diverges from FedAvg at round {r}");
    }

    let mut apfl = short(StrategyKind::APFL, rounds);
    apfl.strategy.alpha_mode = AlphaMode::Fixed;
    apfl.strategy.alpha_init = 0.0;
    let (_, t) = run_traced(&apfl).map_err(|e| e.to_string())?;
    for (r, (a, b)) in t.iter().zip(&fedavg).enumerate() {
        ensure!(same_bits(a, b), "APFL(Fixed, alpha=0) diverges from FedAvg at round {r}");
    }

    let cfg = short(StrategyKind::FedAvg, rounds);
    let model = Model::new(cfg.model.clone()).map_err(|e| e.to_string())?;
    let w0 = initial_global(&cfg);
    let norm0 = NormState::from_params(&w0, cfg.model.hidden.len()).map_err(|e| e.to_string())?;
    let sites = make_benchmark(&cfg.data, cfg.seed).map_err(|e| e.to_string())?;
    let mut clients = sites
        .into_iter()
        .map(|s| ClientState::new(&model, s, &w0, norm0.clone(), 0.0, cfg.sgd(cfg.lr)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let none = BTreeSet::new();
    let mut w = w0;
    for (r, expected) in fedavg.iter().enumerate() {
        let h = hyper(&cfg, r as u32);
        let mut payloads = Vec::new();
        for c in &mut clients {
            let mut twin = c.clone();
            let (p, _) = local_train_partitioned(&model, c, &w, &none, &h).map_err(|e| e.to_string())?;
            let (q, _) = local_train_fedprox(&model, &mut twin, &w, 0.0, &h).map_err(|e| e.to_string())?;
            ensure!(same_bits(&p.delta, &q.delta), "partitioned(empty) delta differs at round {r}");
            payloads.push(p);
        }
        w = aggregate_fedavg(&w, &payloads).map_err(|e| e.to_string())?;
        ensure!(same_bits(&w, expected), "partitioned(empty) diverges from FedAvg at round {r}");
    }
    Ok(format!("FedProx(mu=0), partitioned(empty), APFL(Fixed, 0) match FedAvg bitwise over {rounds} rounds"))
}

fn random_set(rng: &mut ChaCha8Rng) -> ParameterSet {
    let tags = [LayerTag::Base, LayerTag::Norm, LayerTag::Head];
    let entries = (0..4)
        .map(|i| {
            let n = rng.random_range(1..20);
            let values = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            Entry::new(format!("e{i}"), tags[i % 3], vec![n], values).unwrap()
        })
        .collect();
    ParameterSet::from_entries(entries).unwrap()
}

fn mixing_degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let u = random_set(&mut rng);
        let w = u.map(|_, _| rng.random_range(-1e3..1e3));
        ensure!(same_bits(&apfl_mix(&u, &w, 0.0).unwrap(), &w), "mix(u, w, 0) != w");
        ensure!(same_bits(&apfl_mix(&u, &w, 1.0).unwrap(), &u), "mix(u, w, 1) != u");
    }
    let mut cfg = tiny(StrategyKind::APFL);
    cfg.rounds = 30;
    cfg.personalization_delay = 0;
    cfg.strategy.eta_alpha = 1e4;
    cfg.strategy.alpha_init = 0.5;
    let log = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let mut at_bounds = 0;
    for r in log.records() {
        ensure!((0.0..=1.0).contains(&r.alpha), "alpha {} at round {} client {}", r.alpha, r.round, r.client);
        if r.alpha == 0.0 || r.alpha == 1.0 {
            at_bounds += 1;
        }
    }
    Ok(format!(
        "200 random mixes exact; {} alpha values in [0, 1] with eta_alpha=1e4, {at_bounds} clipped",
        log.records().len()
    ))
}

/// Per-client alpha after each round, starting with the initial value.
fn alpha_paths(log: &MetricsLog, alpha0: f64) -> Vec<Vec<f64>> {
    (0..log.num_clients() as u32)
        .map(|c| {
            std::iter::once(alpha0)
                .chain(log.records().iter().filter(|r| r.client == c).map(|r| r.alpha))
                .collect()
        })
        .collect()
}

fn alpha_dynamics() -> Outcome {
    let cfg = ExperimentConfig::default();
    ensure!(cfg.strategy.kind == StrategyKind::APFL && cfg.strategy.alpha_init == 0.01, "defaults changed");
    let log = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (c, path) in alpha_paths(&log, cfg.strategy.alpha_init).iter().enumerate() {
        let steps = path.len() - 1;
        let up = path.windows(2).filter(|p| p[1] >= p[0]).count();
        let frac = up as f64 / steps as f64;
        let last = *path.last().unwrap();
        ok &= frac >= 0.8 && last > 0.5;
        parts.push(format!("silo {c}: {up}/{steps} non-decreasing, final {last:.3}"));
    }
    let detail = parts.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_final_avg(base: &ExperimentConfig, kind: StrategyKind, seeds: usize) -> Result<f64, String> {
    let mut total = 0.0;
    for k in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = sweep_seed(base.seed, k);
        cfg.strategy.kind = kind;
        let log = run_experiment(&cfg).map_err(|e| e.to_string())?;
        total += 100.0 * log.summary().final_unweighted_avg;
    }
    Ok(total / seeds as f64)
}

fn accuracy_ordering() -> Outcome {
    let seeds = 5;
    let base = ExperimentConfig::default();
    let apfl = mean_final_avg(&base, StrategyKind::APFL, seeds)?;
    let local = mean_final_avg(&base, StrategyKind::Local, seeds)?;
    let fedavg = mean_final_avg(&base, StrategyKind::FedAvg, seeds)?;
    let mut iid = base.clone();
    iid.data.mode = PartitionMode::FeatureShift;
    iid.data.heterogeneity = 0.0;
    let iid_fedavg = mean_final_avg(&iid, StrategyKind::FedAvg, seeds)?;
    let iid_local = mean_final_avg(&iid, StrategyKind::Local, seeds)?;
    let detail = format!(
        "APFL {apfl:.2} / Local {local:.2} / FedAvg {fedavg:.2}; IID FedAvg {iid_fedavg:.2} vs Local {iid_local:.2}"
    );
    if apfl > local && local > fedavg && apfl - fedavg >= 5.0 && iid_fedavg >= iid_local - 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn partition_structure() -> Outcome {
    let cfg = short(StrategyKind::FedBN, 4);
    let norm_tag: BTreeSet<LayerTag> = [LayerTag::Norm].into_iter().collect();
    let mut w = initial_global(&cfg);
    let sites = make_benchmark(&cfg.data, cfg.seed).map_err(|e| e.to_string())?;
    let mut clients = sites
        .into_iter()
        .map(|s| ClientRuntime::new(&cfg, s, &w))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    for round in 0..cfg.rounds as u32 {
        let starts: Vec<ParameterSet> = clients
            .iter()
            .map(|c| filter_merge(&w, &c.state().local_params, &norm_tag).unwrap())
            .collect();
        for (i, e) in w.entries().iter().enumerate() {
            let shared = starts.iter().all(|s| entry_bits_equal(&s.entries()[i], e));
            if e.tag == LayerTag::Norm {
                if round > 0 && e.name.contains("gamma") {
                    let distinct = starts
                        .iter()
                        .enumerate()
                        .all(|(a, sa)| starts[a + 1..].iter().all(|sb| !entry_bits_equal(&sa.entries()[i], &sb.entries()[i])));
                    ensure!(distinct, "round {round}: {} identical across clients", e.name);
                }
            } else {
                ensure!(shared, "round {round}: {} differs from the downloaded model", e.name);
            }
        }
        let payloads = clients
            .iter_mut()
            .map(|c| c.train_round(round, &w))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let next = aggregate_fedavg(&w, &payloads).map_err(|e| e.to_string())?;
        for (a, b) in next.entries().iter().zip(w.entries()) {
            if a.tag == LayerTag::Norm {
                ensure!(entry_bits_equal(a, b), "round {round}: global {} changed", a.name);
            }
        }
        w = next;
        for c in &mut clients {
            c.report(&w).map_err(|e| e.to_string())?;
        }
    }

    let per = short(StrategyKind::FedPer, 6);
    let w0 = initial_global(&per);
    let (_, trace) = run_traced(&per).map_err(|e| e.to_string())?;
    for (r, w) in trace.iter().enumerate() {
        for (a, b) in w.entries().iter().zip(w0.entries()) {
            if a.tag == LayerTag::Head {
                ensure!(entry_bits_equal(a, b), "FedPer round {r}: global {} changed", a.name);
            }
        }
        ensure!(!same_bits(w, &w0), "FedPer round {r}: backbone did not move");
    }
    Ok(format!(
        "FedBN shared entries identical and Norm distinct over {} rounds; FedPer head fixed over {} rounds",
        cfg.rounds, per.rounds
    ))
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn fedsilo(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedsilo"));
    c.args(args).stdout(Stdio::null()).stderr(Stdio::piped());
    c
}

fn finish(child: Child, what: &str) -> Result<(), String> {
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "{what} exited with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn cross_mode_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).display().to_string();
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 17;
    fs::write(d.join("exp.toml"), cfg.to_toml()).map_err(|e| e.to_string())?;
    let config = p("exp.toml");
    let data = p("data");

    finish(fedsilo(&["gen-data", "--config", &config, "--out", &data]).spawn().unwrap(), "gen-data")?;
    finish(
        fedsilo(&["simulate", "--config", &config, "--out-csv", &p("sim.csv"), "--out-json", &p("sim.json")])
            .spawn()
            .unwrap(),
        "simulate",
    )?;
    let addr = format!("127.0.0.1:{}", free_port());
    let server = fedsilo(&[
        "serve", "--config", &config, "--bind", &addr, "--out-csv", &p("net.csv"), "--out-json", &p("net.json"),
    ])
    .spawn()
    .unwrap();
    let clients: Vec<Child> = [2, 0, 1]
        .iter()
        .map(|id| {
            let site = Path::new(&data).join(format!("site_{id}.skel")).display().to_string();
            fedsilo(&["join", "--server", &addr, "--client-id", &id.to_string(), "--data", &site, "--config", &config])
                .spawn()
                .unwrap()
        })
        .collect();
    finish(server, "serve")?;
    for c in clients {
        finish(c, "join")?;
    }
    let sim = fs::read(d.join("sim.csv")).map_err(|e| e.to_string())?;
    let net = fs::read(d.join("net.csv")).map_err(|e| e.to_string())?;
    ensure!(sim == net, "metrics CSVs differ ({} vs {} bytes)", sim.len(), net.len());
    Ok(format!("{} rounds, 3 join processes, {} identical CSV bytes", cfg.rounds, sim.len()))
}

fn valid_frames() -> Vec<Vec<u8>> {
    let cfg = tiny(StrategyKind::APFL);
    let w = initial_global(&cfg);
    let log = run_experiment(&cfg).unwrap();
    [
        Message::Join { client_id: 1, n_train: 80 },
        Message::Welcome { round: 0, config: Box::new(cfg.clone()) },
        Message::Global { round: 2, params: w.clone() },
        Message::Update(UploadPayload { client_id: 2, n_i: 16, round: 1, delta: w.zeros_like() }),
        Message::Metric(log.records()[0].clone()),
        Message::Shutdown { reason: "done".into() },
    ]
    .iter()
    .map(encode_message)
    .collect()
}

fn protocol_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let seeds = valid_frames();
    let mut accepted = 0;
    let total = 120_000;
    for i in 0..total {
        let frame: Vec<u8> = match i % 3 {
            0 => (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
            1 => {
                let body: Vec<u8> = (0..rng.random_range(0..48)).map(|_| rng.random()).collect();
                let mut f = ((body.len() + 1) as u32).to_le_bytes().to_vec();
                f.push(rng.random_range(0..8));
                f.extend(body);
                f
            }
            _ => {
                let mut f = seeds[rng.random_range(0..seeds.len())].clone();
                for _ in 0..rng.random_range(1..4) {
                    if f.is_empty() {
                        break;
                    }
                    match rng.random_range(0..3) {
                        0 => {
                            let at = rng.random_range(0..f.len());
                            f[at] ^= 1 << rng.random_range(0..8);
                        }
                        1 => f.truncate(rng.random_range(0..f.len())),
                        _ => f.push(rng.random()),
                    }
                }
                f
            }
        };
        let decoded = panic::catch_unwind(|| decode_message(&frame))
            .map_err(|_| format!("decoder panicked on frame {i}"))?;
        let streamed = panic::catch_unwind(|| read_frame(&mut frame.as_slice()).map(|b| decode_message(&b)))
            .map_err(|_| format!("reader panicked on frame {i}"))?;
        if let Ok(m) = decoded {
            ensure!(encode_message(&m) == frame, "frame {i} accepted but not canonical");
            ensure!(matches!(streamed, Ok(Ok(_))), "frame {i}: stream and slice decoding disagree");
            accepted += 1;
        }
    }

    let stale = stale_update_rejected()?;
    let dup = duplicate_join_rejected()?;
    Ok(format!("{total} fuzz frames, 0 panics, {accepted} accepted (all canonical); {stale}; {dup}"))
}

fn spawn_server(cfg: &ExperimentConfig) -> (String, thread::JoinHandle<Result<MetricsLog, NetError>>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    let cfg = cfg.clone();
    (addr, thread::spawn(move || serve_on(&cfg, l)))
}

fn site_file(cfg: &ExperimentConfig, site: usize) -> SkeletonFile {
    SkeletonFile {
        frames: cfg.data.frames,
        joints: cfg.data.joints,
        classes: cfg.data.num_classes(),
        samples: generate_benchmark_site(&cfg.data, site, cfg.seed),
    }
}

fn spawn_client(cfg: &ExperimentConfig, addr: &str, id: u32) -> thread::JoinHandle<Result<u32, NetError>> {
    let file = site_file(cfg, id as usize);
    let opts = JoinOptions::from_config(cfg);
    let addr = addr.to_string();
    thread::spawn(move || join(&addr, id, file, &opts).map(|o| o.rounds))
}

fn recv(s: &mut TcpStream) -> Result<Message, String> {
    let f = read_frame(s).map_err(|e| e.to_string())?;
    decode_message(&f).map_err(|e| e.to_string())
}

fn stale_update_rejected() -> Outcome {
    let cfg = tiny(StrategyKind::FedAvg);
    let (addr, server) = spawn_server(&cfg);
    let honest = [spawn_client(&cfg, &addr, 0), spawn_client(&cfg, &addr, 1)];
    let mut fake = TcpStream::connect(&addr).map_err(|e| e.to_string())?;
    write_message(&mut fake, &Message::Join { client_id: 2, n_train: 16 }).map_err(|e| e.to_string())?;
    ensure!(matches!(recv(&mut fake)?, Message::Welcome { .. }), "no WELCOME");
    let params = match recv(&mut fake)? {
        Message::Global { round: 0, params } => params,
        other => return Err(format!("expected GLOBAL(0), got {}", other.kind())),
    };
    let update = UploadPayload { client_id: 2, n_i: 16, round: 5, delta: params.zeros_like() };
    write_message(&mut fake, &Message::Update(update)).map_err(|e| e.to_string())?;
    let reply = recv(&mut fake)?;
    ensure!(reply == Message::Shutdown { reason: STALE_ROUND.into() }, "stale UPDATE answered with {reply:?}");
    ensure!(matches!(server.join().unwrap(), Err(NetError::Protocol(_))), "server did not abort");
    for h in honest {
        ensure!(h.join().unwrap().is_err(), "an honest client finished a rejected run");
    }
    Ok("stale UPDATE refused and run aborted".into())
}

fn duplicate_join_rejected() -> Outcome {
    let cfg = tiny(StrategyKind::FedAvg);
    let (addr, server) = spawn_server(&cfg);
    let first = spawn_client(&cfg, &addr, 0);
    thread::sleep(Duration::from_millis(200));
    let mut dup = TcpStream::connect(&addr).map_err(|e| e.to_string())?;
    write_message(&mut dup, &Message::Join { client_id: 0, n_train: 16 }).map_err(|e| e.to_string())?;
    let reply = recv(&mut dup)?;
    ensure!(
        matches!(&reply, Message::Shutdown { reason } if reason.contains("duplicate")),
        "duplicate JOIN answered with {reply:?}"
    );
    let rest = [spawn_client(&cfg, &addr, 1), spawn_client(&cfg, &addr, 2)];
    let log = server.join().unwrap().map_err(|e| e.to_string())?;
    ensure!(first.join().unwrap().is_ok(), "first client failed");
    for h in rest {
        ensure!(h.join().unwrap().is_ok(), "client failed");
    }
    ensure!(log.rounds() == cfg.rounds, "run incomplete after duplicate");
    Ok("duplicate JOIN refused, run completed".into())
}

/// Forwards bytes both ways, keeping a copy of each direction.
fn pump(mut from: TcpStream, mut to: TcpStream, sink: Arc<Mutex<Vec<u8>>>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = vec![0u8; 1 << 16];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    sink.lock().unwrap().extend_from_slice(&buf[..n]);
                    if to.write_all(&buf[..n]).is_err() {
                        break;
                    }
                }
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    })
}

fn data_residency() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = 3;
    cfg.warmup_rounds = 2;
    cfg.personalization_delay = 1;
    let (server_addr, server) = spawn_server(&cfg);
    let proxy = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let proxy_addr = proxy.local_addr().unwrap().to_string();
    let streams: Vec<Arc<Mutex<Vec<u8>>>> = (0..6).map(|_| Arc::default()).collect();
    let relay = {
        let streams = streams.clone();
        thread::spawn(move || {
            let mut pumps = Vec::new();
            for pair in streams.chunks(2) {
                let (client, _) = proxy.accept().unwrap();
                let upstream = TcpStream::connect(&server_addr).unwrap();
                pumps.push(pump(client.try_clone().unwrap(), upstream.try_clone().unwrap(), pair[0].clone()));
                pumps.push(pump(upstream, client, pair[1].clone()));
            }
            pumps.into_iter().for_each(|p| p.join().unwrap());
        })
    };
    let clients: Vec<_> = (0..3).map(|id| spawn_client(&cfg, &proxy_addr, id)).collect();
    server.join().unwrap().map_err(|e| e.to_string())?;
    for c in clients {
        c.join().unwrap().map_err(|e| e.to_string())?;
    }
    relay.join().unwrap();

    let payload = params_len(&initial_global(&cfg));
    let sample_bytes = cfg.data.frames * cfg.data.joints * 3 * 8;
    let mut raw = HashSet::new();
    for site in 0..3 {
        for s in generate_benchmark_site(&cfg.data, site, cfg.seed) {
            raw.extend(s.coords.iter().map(|v| v.to_bits()));
        }
    }
    let mut seen = BTreeSet::new();
    let (mut frames, mut largest_text, mut largest) = (0, 0, 0);
    for s in &streams {
        let bytes = s.lock().unwrap();
        let mut rest = bytes.as_slice();
        while !rest.is_empty() {
            let frame = read_frame(&mut rest).map_err(|e| format!("capture is not a frame sequence: {e}"))?;
            let msg = decode_message(&frame).map_err(|e| format!("undecodable frame in capture: {e}"))?;
            let body = frame.len() - 5;
            ensure!(body <= payload + 64, "{} body of {body} bytes exceeds {payload} + 64", msg.kind());
            if !matches!(msg, Message::Global { .. } | Message::Update(_)) {
                ensure!(body < sample_bytes, "{} body of {body} bytes could hold a sample", msg.kind());
                largest_text = largest_text.max(body);
            }
            largest = largest.max(body);
            seen.insert(frame[4]);
            frames += 1;
        }
        let hits = bytes
            .windows(8)
            .filter(|w| raw.contains(&u64::from_le_bytes((*w).try_into().unwrap())))
            .count();
        ensure!(hits == 0, "{hits} raw coordinate values found in the capture");
    }
    ensure!(seen == (1..=6).collect(), "frame types seen: {seen:?}");
    Ok(format!(
        "{frames} frames of types {seen:?}; largest body {largest} <= {payload} + 64; non-parameter bodies <= {largest_text} bytes; no raw coordinates on the wire"
    ))
}

fn warmup_schedule() -> Outcome {
    let cfg = ExperimentConfig::default();
    let close = |r: usize, want: f64| (warmup_lr(r, &cfg) - want).abs() < 1e-12;
    ensure!(close(0, 0.01), "round 0: {}", warmup_lr(0, &cfg));
    ensure!(close(2, 0.046), "round 2: {}", warmup_lr(2, &cfg));
    for r in 5..cfg.rounds {
        ensure!(close(r, 0.1), "round {r}: {}", warmup_lr(r, &cfg));
    }
    let lrs: Vec<String> = (0..6).map(|r| format!("{:.3}", warmup_lr(r, &cfg))).collect();
    Ok(format!("rounds 0..5: {}", lrs.join(", ")))
}
