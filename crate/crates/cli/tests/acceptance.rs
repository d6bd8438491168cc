//! End-to-end acceptance suite. Every criterion runs even when an earlier one
//! fails; each prints one `[PASS]` or `[FAIL]` line and the test fails at the
//! end if any criterion did.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use adamct::blocks::{causal_mask, Dropouts, MixtureMode, Pass, ScoreActivation};
use adamct::checkpoint::{load_checkpoint, save_checkpoint};
use adamct::data::{build_sequences, ingest_interactions, split_leave_one_out, DatasetStats, IngestOptions, Role};
use adamct::evaluate::{ndcg_at_k, rank_ground_truth, recall_at_k};
use adamct::model::{cross_entropy_loss, init_model, Model, ModelConfig};
use adamct::params::ParamStore;
use adamct::tensor::{Mode, Real, Tape, Tensor};
use adamct::RngState;
use adamct_cli::ablation::GridKind;
use adamct_cli::commands::{cmd_ablate, cmd_gradcheck, cmd_train, load_dataset, train_pipeline};
use adamct_cli::config::{load_config, RunConfig};
use rand::Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.toml"))
}

fn jitter<T: Real>(store: &mut ParamStore<T>, rng: &mut RngState, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v + T::of(rng.random_range(-scale..scale));
        }
    }
}

fn random_rows(rng: &mut RngState, n: usize, d: usize, scale: f64) -> Tensor<f64> {
    let data = (0..n * d).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn left_padded(rng: &mut RngState, n: usize, len: usize, num_items: usize) -> Vec<usize> {
    (0..n).map(|i| if i < n - len { 0 } else { rng.random_range(1..=num_items) }).collect()
}

fn small_model(mixture: MixtureMode, scores: ScoreActivation) -> ModelConfig {
    ModelConfig {
        num_items: 30,
        d_model: 8,
        num_heads: 2,
        max_len: 8,
        mixture,
        seatt_global: scores,
        seatt_local: scores,
        ..Default::default()
    }
}

fn gradient_correctness() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut cfg = load_config(&preset("gradcheck")).map_err(|e| e.to_string())?;
    cfg.output_dir = dir.path().to_path_buf();
    let m = &cfg.model;
    ensure!(
        (m.max_len, m.d_model, m.num_heads, m.num_layers, m.kernel_size, m.reduction_ratio, m.num_items)
            == (8, 8, 2, 2, 3, 2, 20)
            && cfg.gradcheck.batch_size == 4,
        "preset drifted from the required shape"
    );
    let start = Instant::now();
    let report = cmd_gradcheck(&cfg, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let groups: HashSet<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
    for g in [
        "embeddings",
        "positional",
        "global_encoder",
        "local_encoder",
        "attention",
        "conv",
        "global_seatt",
        "local_seatt",
        "mixture",
        "output_head",
    ] {
        ensure!(groups.contains(g), "group {g} was not checked");
    }
    for g in &report.groups {
        ensure!(g.max_relative_error < 1e-5, "{} max relative error {:e}", g.group, g.max_relative_error);
    }
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!(
        "{} groups, worst {:.2e}, {:.1}s",
        report.groups.len(),
        report.max_relative_error,
        took.as_secs_f64()
    ))
}

fn causality() -> Outcome {
    let cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Sigmoid);
    let (n, d) = (cfg.max_len, cfg.d_model);
    let mut rng = RngState::new(21);
    let mut model: Model<f64> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.3);
    let mask = causal_mask(n);
    let att = &model.layout.layers[0].global.as_ref().unwrap().attention;
    let run = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let pass = Pass {
            tape: &tape,
            params: &params,
            mode: Mode::Eval,
            dropout: Dropouts::default(),
        };
        let out = pass
            .multi_head_self_attention(att, tape.constant(x), &mask, &vec![true; n], &mut RngState::new(0))
            .unwrap();
        tape.value(out)
    };
    for trial in 0..100 {
        let x = random_rows(&mut rng, n, d, 2.0);
        let base = run(&x);
        let t = trial % (n - 1);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + 1) * d..] {
            *v += rng.random_range(-3.0..3.0);
        }
        let moved = run(&y);
        for row in 0..=t {
            ensure!(
                base.row(row) == moved.row(row),
                "trial {trial}: row {row} changed after perturbing rows > {t}"
            );
        }
    }
    Ok("100 inputs, earlier rows bitwise unchanged".into())
}

fn seatt_scores(model: &Model<f64>, x: &Tensor<f64>, valid: &[bool]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let pass = Pass {
        tape: &tape,
        params: &params,
        mode: Mode::Eval,
        dropout: Dropouts::default(),
    };
    let layer = &model.layout.layers[0];
    let branches = [layer.global.as_ref().unwrap().seatt, layer.local.as_ref().unwrap().seatt];
    branches
        .iter()
        .map(|w| tape.data(pass.seatt(w.as_ref().unwrap(), tape.constant(x), valid).unwrap().0))
        .collect()
}

fn seatt_non_exclusive() -> Outcome {
    let cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Sigmoid);
    let (n, d) = (cfg.max_len, cfg.d_model);
    let mut rng = RngState::new(31);

    // Constructed case: zero squeeze/excite weights and a positive excite bias.
    let mut model: Model<f64> = init_model(&cfg, &mut rng).unwrap();
    let se = model.layout.layers[0].global.as_ref().unwrap().seatt.unwrap();
    for id in [se.squeeze, se.squeeze_bias, se.excite] {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    model.params.get_mut(se.excite_bias).data_mut().fill(1.0);
    let s = &seatt_scores(&model, &random_rows(&mut rng, n, d, 1.0), &vec![true; n])[0];
    ensure!(s.iter().all(|&v| v > 0.5), "constructed scores {s:?}");

    let mut model: Model<f64> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.5);
    for i in 0..1000 {
        let x = random_rows(&mut rng, n, d, 3.0);
        for s in seatt_scores(&model, &x, &vec![true; n]) {
            ensure!(s.iter().all(|&v| v > 0.0 && v < 1.0), "input {i}: sigmoid score outside (0,1)");
        }
    }

    let soft_cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Softmax);
    let mut soft: Model<f64> = init_model(&soft_cfg, &mut rng).unwrap();
    jitter(&mut soft.params, &mut rng, 0.5);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x = random_rows(&mut rng, n, d, 3.0);
        let pad = i % n;
        let valid: Vec<bool> = (0..n).map(|p| p >= pad).collect();
        for s in seatt_scores(&soft, &x, &valid) {
            worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "softmax scores sum off by {worst:e}");
    Ok(format!("constructed case all > 0.5; 1000 inputs in (0,1); softmax sum error {worst:.1e}"))
}

fn branch_gradients(mixture: MixtureMode, seed: u64) -> Vec<(String, bool)> {
    let cfg = small_model(mixture, ScoreActivation::Sigmoid);
    let mut rng = RngState::new(seed);
    let mut model: Model<f64> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.2);
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let mut total = None;
    for len in [8, 5, 2] {
        let items = left_padded(&mut rng, cfg.max_len, len, cfg.num_items);
        let out = model.forward(&tape, &params, &items, Mode::Train, &mut rng).unwrap();
        let l = cross_entropy_loss(&tape, out.logits, 1 + len).unwrap();
        total = Some(total.map_or(l, |t| tape.add(t, l).unwrap()));
    }
    let grads = tape.backward(total.unwrap()).unwrap();
    model
        .params
        .ids()
        .map(|id| {
            let g = grads.get(params[id]).unwrap_or(&[]);
            (model.params.name(id).to_string(), g.iter().any(|&v| v != 0.0))
        })
        .collect()
}

fn mixture_boundaries() -> Outcome {
    for (weight, silent, live) in [(0.0, ".local.", ".global."), (1.0, ".global.", ".local.")] {
        let grads = branch_gradients(MixtureMode::Fixed(weight), 41);
        let silenced: Vec<_> = grads.iter().filter(|(n, _)| n.contains(silent)).collect();
        ensure!(!silenced.is_empty(), "no {silent} parameters found");
        for (name, nonzero) in &silenced {
            ensure!(!nonzero, "fixed {weight}: {name} received gradient");
        }
        ensure!(
            grads.iter().any(|(n, g)| n.contains(live) && *g),
            "fixed {weight}: the other branch received no gradient"
        );
    }

    let cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Sigmoid);
    let mut rng = RngState::new(43);
    let mut model: Model<f32> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.5);
    let mut lo = 1.0f64;
    let mut hi = 0.0f64;
    for b in 0..200 {
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let items = left_padded(&mut rng, cfg.max_len, 1 + b % cfg.max_len, cfg.num_items);
        let mode = if b % 2 == 0 { Mode::Train } else { Mode::Eval };
        let out = model.forward(&tape, &params, &items, mode, &mut rng).unwrap();
        for tr in &out.traces {
            let a = f64::from(tape.data(tr.alpha.unwrap())[0]);
            ensure!(a > 0.0 && a < 1.0, "batch {b}: alpha {a}");
            ensure!(a + (1.0 - a) == 1.0, "batch {b}: weights do not sum to one");
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    Ok(format!("silenced branches exact zero; adaptive alpha in [{lo:.3}, {hi:.3}]"))
}

/// Rank by sorting: the target sits after every negative with an equal score.
fn sorted_position(target: f64, negatives: &[f64]) -> usize {
    let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).collect();
    all.push((target, true));
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.iter().position(|x| x.1).unwrap()
}

fn metric_oracle() -> Outcome {
    let mut rng = RngState::new(51);
    for rank in 1..=101usize {
        let above = rank - 1;
        let ties = if above > 0 { rng.random_range(0..=above) } else { 0 };
        let mut negatives: Vec<f64> = (0..100)
            .map(|i| match i {
                i if i < ties => 0.5,
                i if i < above => rng.random_range(0.6..2.0),
                _ => rng.random_range(-2.0..0.4),
            })
            .collect();
        negatives.reverse();
        let pos = sorted_position(0.5, &negatives);
        let got = rank_ground_truth(0.5, &negatives).map_err(|e| e.to_string())?;
        ensure!(got == rank && pos + 1 == rank, "rank {rank}: got {got}, sort gives {}", pos + 1);
        for k in [1, 5, 10] {
            let recall = if pos < k { 1.0 } else { 0.0 };
            let ndcg = if pos < k { 1.0 / ((pos + 2) as f64).log2() } else { 0.0 };
            ensure!(recall_at_k(rank, k) == recall, "recall rank {rank} k {k}");
            ensure!(ndcg_at_k(rank, k) == ndcg, "ndcg rank {rank} k {k}");
        }
    }
    ensure!(ndcg_at_k(3, 10) == 0.5, "ndcg(3, 10) = {}", ndcg_at_k(3, 10));
    Ok("ranks 1..101 x K {1,5,10} exact; ndcg(3,10) = 0.5".into())
}

const FIXTURE: &str = "\
user,item,ts
u1,a,30
u1,b,10
u1,c,20
u1,d,40
u1,e,50
u2,b,5
u2,c,5
u2,a,1
u2,f,7
u2,g,9
u2,h,11
u3,a,100
u3,h,101
u3,g,102
u3,f,103
u3,e,104
u3,d,105
u3,c,106
u4,z,1
u4,a,2
u4,b,3
u4,c,4
u5,e,3
u5,d,2
u5,c,1
u5,b,4
u5,a,5
u6,f,1
u6,f,2
u6,g,3
u6,h,4
u6,a,5
";

fn leave_one_out() -> Outcome {
    let opts = IngestOptions {
        has_header: true,
        ..Default::default()
    };
    let rows = ingest_interactions(FIXTURE.as_bytes(), &opts).map_err(|e| e.to_string())?;
    let ds = build_sequences(&rows.interactions).map_err(|e| e.to_string())?;
    ensure!(ds.user_ids == ["u1", "u2", "u3", "u5", "u6"], "retained users {:?}", ds.user_ids);
    ensure!(!ds.item_ids.iter().any(|i| i == "z"), "item of the dropped user survived");
    let names = |ids: &[usize]| ids.iter().map(|&i| ds.item_ids[i - 1].as_str()).collect::<Vec<_>>().join("");
    let splits = split_leave_one_out(&ds, false);
    let expected = [
        ("bc", "a", "bca", "d", "bcad", "e"),
        ("abc", "f", "abcf", "g", "abcfg", "h"),
        ("ahgf", "e", "ahgfe", "d", "ahgfed", "c"),
        ("cd", "e", "cde", "b", "cdeb", "a"),
        ("ff", "g", "ffg", "h", "ffgh", "a"),
    ];
    for (u, e) in expected.iter().enumerate() {
        let (tr, va, te) = (&splits.train[u], &splits.valid[u], &splits.test[u]);
        ensure!((tr.role, va.role, te.role) == (Role::Train, Role::Valid, Role::Test), "user {u} roles");
        let got = (
            names(&tr.input),
            names(&[tr.target]),
            names(&va.input),
            names(&[va.target]),
            names(&te.input),
            names(&[te.target]),
        );
        let want = (e.0, e.1, e.2, e.3, e.4, e.5);
        ensure!(
            (got.0.as_str(), got.1.as_str(), got.2.as_str(), got.3.as_str(), got.4.as_str(), got.5.as_str()) == want,
            "user {}: {got:?}",
            ds.user_ids[u]
        );
    }
    let stats = ds.stats();
    ensure!(
        DatasetStats::CSV_HEADER == "interactions,users,items,avg_user_len,avg_item_len,sparsity",
        "columns {}",
        DatasetStats::CSV_HEADER
    );
    ensure!(
        (stats.interactions, stats.users, stats.items) == (28, 5, 8)
            && (stats.avg_user_len - 5.6).abs() < 1e-12
            && (stats.avg_item_len - 3.5).abs() < 1e-12
            && (stats.sparsity - 0.3).abs() < 1e-12,
        "stats {stats:?}"
    );
    Ok(format!("5 of 6 users kept, splits item-for-item, stats {}", stats.csv_row()))
}

fn learnability() -> Outcome {
    let cfg = load_config(&preset("cyclic")).map_err(|e| e.to_string())?;
    let dataset = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let splits = split_leave_one_out(&dataset, false);
    let start = Instant::now();
    let run = train_pipeline(&cfg, &dataset, &splits, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let r1 = run.test.recall_at(1).unwrap();

    let control_cfg = load_config(&preset("uniform")).map_err(|e| e.to_string())?;
    let control_data = load_dataset(&control_cfg).map_err(|e| e.to_string())?;
    let control_splits = split_leave_one_out(&control_data, false);
    let control = train_pipeline(&control_cfg, &control_data, &control_splits, None).map_err(|e| e.to_string())?;
    let c1 = control.test.recall_at(1).unwrap();
    let chance = 1.0 / (control_cfg.eval.num_negatives + 1) as f64;
    let sigma = (chance * (1.0 - chance) / control.test.num_users as f64).sqrt();

    let detail = format!(
        "cyclic Recall@1 {r1:.3} in {:.0}s ({} epochs); uniform Recall@1 {c1:.4} vs chance {chance:.4} +- {:.4}",
        took.as_secs_f64(),
        run.history.epochs.len(),
        3.0 * sigma
    );
    ensure!(r1 >= 0.90, "{detail}");
    ensure!(took < Duration::from_secs(300), "{detail}");
    ensure!((c1 - chance).abs() <= 3.0 * sigma, "{detail}");
    Ok(detail)
}

fn ablation_config(dir: &Path) -> RunConfig {
    let mut cfg = load_config(&preset("cyclic")).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg.model.d_model = 16;
    cfg.model.hidden_dropout = 0.2;
    cfg.model.attn_dropout = 0.2;
    cfg.train.max_epochs = 20;
    cfg.train.patience = 20;
    cfg.train.lr = 5e-3;
    cfg
}

fn ablation_harness() -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg = ablation_config(dir.path());
    let mut summary = Vec::new();
    let mut mixture = None;
    for (grid, rows) in [(GridKind::Mixture, 6), (GridKind::Seatt, 4), (GridKind::Components, 5)] {
        let report = cmd_ablate(&cfg, grid, &[7]).map_err(|e| e.to_string())?;
        ensure!(report.rows.len() == rows, "{grid} grid has {} rows", report.rows.len());
        for r in &report.rows {
            ensure!(!r.failed && r.mean_ndcg10.is_some(), "{grid}/{} did not complete", r.cell);
        }
        let csv = fs::read_to_string(dir.path().join(format!("ablate_{grid}/report.csv"))).unwrap();
        ensure!(csv.lines().count() == rows + 1, "{grid} report.csv has {} lines", csv.lines().count());
        summary.push(format!("{grid} {rows}"));
        if grid == GridKind::Mixture {
            mixture = Some(report);
        }
    }
    let mixture = mixture.unwrap();
    let adaptive = mixture.row("adaptive").unwrap().mean_ndcg10.unwrap();
    let worst = mixture
        .rows
        .iter()
        .filter(|r| r.cell.starts_with("fixed_"))
        .map(|r| r.mean_ndcg10.unwrap())
        .fold(f64::INFINITY, f64::min);
    ensure!(adaptive >= worst, "adaptive NDCG@10 {adaptive:.4} below worst fixed {worst:.4}");
    Ok(format!(
        "rows {}; adaptive NDCG@10 {adaptive:.4} >= worst fixed {worst:.4}",
        summary.join(", ")
    ))
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut cfg = load_config(&preset("cyclic")).unwrap();
    cfg.deterministic = true;
    cfg.train.max_epochs = 4;
    cfg.data.synthetic.as_mut().unwrap().num_users = 60;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        cfg.output_dir = dir.path().join(name);
        pool.install(|| cmd_train(&cfg)).map_err(|e| e.to_string())?;
        let read = |f: &str| fs::read(cfg.output_dir.join(f)).unwrap();
        outputs.push((read("history.csv"), read("checkpoint.bin")));
    }
    ensure!(outputs[0].0 == outputs[1].0, "history CSVs differ");
    ensure!(outputs[0].1 == outputs[1].1, "checkpoints differ");
    Ok(format!("history and {}-byte checkpoint identical", outputs[0].1.len()))
}

fn shared_embedding() -> Outcome {
    let cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Sigmoid);
    let mut rng = RngState::new(61);
    let mut model: Model<f64> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.2);
    ensure!(model.layout.head.table == model.layout.item_table, "head reads a separate table");

    let items = [0, 0, 0, 3, 9, 4, 1, 2];
    let probe = 21;
    ensure!(!items.contains(&probe), "probe item appears in the input");
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let out = model.forward(&tape, &params, &items, Mode::Eval, &mut RngState::new(0)).unwrap();
    let features = tape.data(out.features);
    let before = tape.data(out.logits);
    let delta: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64 - 3.5) / 4.0).collect();
    for (v, d) in model.params.get_mut(model.layout.item_table).row_mut(probe).iter_mut().zip(&delta) {
        *v += d;
    }
    let after = model.logits(&items).unwrap();
    let shift: f64 = features.iter().zip(&delta).map(|(z, d)| z * d).sum();
    for (i, (a, b)) in after.iter().zip(&before).enumerate() {
        if i + 1 == probe {
            ensure!((a - b - shift).abs() < 1e-12 && a != b, "probe logit moved by {} not {shift}", a - b);
        } else {
            ensure!(a == b, "logit of item {} moved", i + 1);
        }
    }

    let report = model.count_parameters();
    let table_shape = [cfg.num_items + 1, cfg.d_model];
    let tables = report.tensors.iter().filter(|t| t.shape == table_shape).count();
    ensure!(tables == 1, "{tables} item-sized tables in the count");
    ensure!(
        report.total == cfg.expected_parameter_count(),
        "count {} vs expected {}",
        report.total,
        cfg.expected_parameter_count()
    );
    Ok(format!("write-through seen by the head only at item {probe}; {} parameters, one table", report.total))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg = small_model(MixtureMode::Adaptive, ScoreActivation::Sigmoid);
    let mut rng = RngState::new(71);
    let mut model: Model<f32> = init_model(&cfg, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng, 0.3);
    let path = dir.path().join("model.bin");
    save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure!(loaded.config == model.config, "config changed");
    for b in 0..16 {
        let items = left_padded(&mut rng, cfg.max_len, 1 + b % cfg.max_len, cfg.num_items);
        let a: Vec<u32> = model.logits(&items).unwrap().iter().map(|v| v.to_bits()).collect();
        let c: Vec<u32> = loaded.logits(&items).unwrap().iter().map(|v| v.to_bits()).collect();
        ensure!(a == c, "sequence {b}: logits differ");
    }
    Ok("16 sequences, logits bitwise equal".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("causality", causality),
        ("squeeze-excitation non-exclusivity", seatt_non_exclusive),
        ("mixture boundaries", mixture_boundaries),
        ("metric oracle", metric_oracle),
        ("leave-one-out and preprocessing", leave_one_out),
        ("learnability", learnability),
        ("ablation harness", ablation_harness),
        ("determinism", determinism),
        ("shared embedding", shared_embedding),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
        };
        // Written past the test harness's capture so the summary always shows.
        writeln!(std::io::stdout(), "[{tag}] {}. {name}: {detail}", i + 1).unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
