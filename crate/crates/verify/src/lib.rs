//! Acceptance checks over the engine, the trainer and the HTTP service.
//! Each check returns a [`Verdict`] carrying the measured values.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parley::server::{router, serve};
use parley_core::corpus::{copy_pairs, make_batches, parse_cornell, EncodedExample, TermLexicon, Vocabulary};
use parley_core::gradcheck::{run_suite, GradCheckConfig};
use parley_core::inference::{greedy_exact, Engine};
use parley_core::seq2seq::{forward_backward, load_checkpoint, save_checkpoint, CheckpointError, Hyper, ModelParams};
use parley_core::trainer::{detect_overfit, prepare_examples, train, CheckpointSink, LossLog, TrainConfig, TrainOutcome};

const COPY_PAIRS: usize = 500;
const COPY_SYMBOLS: usize = 16;
const COPY_MAX_LEN: usize = 8;
const COPY_DIM: usize = 32;
const COPY_SEED: u64 = 7;
const COPY_EPOCHS: usize = 30;
const COPY_LOSS_TARGET: f64 = 0.5;
const COPY_ACCURACY_TARGET: f64 = 0.9;
const COPY_TIME_LIMIT: Duration = Duration::from_secs(300);
const GRADCHECK_TIME_LIMIT: Duration = Duration::from_secs(60);

/// `Ok` with a detail line on success, `Err` with the same on failure.
pub type Verdict = Result<String, String>;

/// A finished copy-task training run.
pub struct CopyRun {
    pub vocab: Vocabulary,
    pub examples: Vec<EncodedExample>,
    pub outcome: TrainOutcome<f32>,
    pub checkpoint: PathBuf,
    pub elapsed: Duration,
}

/// Trains the copy task, writing per-epoch checkpoints into `dir`.
pub fn copy_task(dir: &Path) -> CopyRun {
    let pairs = copy_pairs(COPY_PAIRS, COPY_SYMBOLS, 1, COPY_MAX_LEN, COPY_SEED);
    let vocab = Vocabulary::build(&pairs, 1, 1000).expect("vocabulary");
    let (examples, rejected) = prepare_examples(&pairs, &vocab, COPY_MAX_LEN);
    assert!(rejected.is_empty());
    let config = TrainConfig {
        epochs: COPY_EPOCHS,
        batch_size: 100,
        learning_rate: 1e-3,
        max_len: COPY_MAX_LEN,
        eval_fraction: 0.0,
        seed: COPY_SEED,
        ..Default::default()
    };
    let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), COPY_DIM, COPY_DIM, 2), COPY_SEED, None).expect("init");
    let start = Instant::now();
    let sink = CheckpointSink { dir, vocab: &vocab };
    let outcome = train(&config, &examples, params, Some(sink)).expect("copy-task training");
    let elapsed = start.elapsed();
    let checkpoint = sink.epoch_path(outcome.log.len());
    CopyRun {
        vocab,
        examples,
        outcome,
        checkpoint,
        elapsed,
    }
}

pub fn gradient_exactness() -> Verdict {
    let start = Instant::now();
    let reports = run_suite(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.rule.as_str()).collect();
    let detail = format!(
        "{} rules, max rel error {worst:.3e} (<= 1e-4), {:.2}s (< 60s)",
        reports.len(),
        elapsed.as_secs_f64()
    );
    if failed.is_empty() && worst <= 1e-4 && elapsed < GRADCHECK_TIME_LIMIT {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing rules {failed:?}"))
    }
}

pub fn closed_form_loss() -> Verdict {
    let pairs = copy_pairs(40, 2, 1, 6, 1234);
    let vocab = Vocabulary::build(&pairs, 1, 100).map_err(|e| e.to_string())?;
    if vocab.len() != 6 {
        return Err(format!("expected V=6, built V={}", vocab.len()));
    }
    let (examples, _) = prepare_examples(&pairs, &vocab, 6);
    let batch = make_batches(&examples, 40, Some(99)).map_err(|e| e.to_string())?.remove(0);
    let (loss, _) = forward_backward(&batch, &ModelParams::<f64>::zeros(Hyper::new(6, 4, 3, 2))).map_err(|e| e.to_string())?;
    let diff = (loss - 6f64.ln()).abs();
    let detail = format!("loss {loss:.12} vs ln 6 = {:.12}, |diff| {diff:.1e}", 6f64.ln());
    if diff <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn copy_convergence(run: &CopyRun) -> Verdict {
    let final_loss = run.outcome.log.rows().last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    let mut correct = 0;
    for ex in &run.examples {
        if greedy_exact(ex, &run.outcome.params).map_err(|e| e.to_string())? {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / run.examples.len() as f64;
    let detail = format!(
        "V={}, final train loss {final_loss:.4} (<= {COPY_LOSS_TARGET}), greedy accuracy {:.1}% (>= {:.0}%), {:.1}s (< 300s)",
        run.vocab.len(),
        accuracy * 100.0,
        COPY_ACCURACY_TARGET * 100.0,
        run.elapsed.as_secs_f64()
    );
    if final_loss <= COPY_LOSS_TARGET && accuracy >= COPY_ACCURACY_TARGET && run.elapsed < COPY_TIME_LIMIT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn loss_reduction(run: &CopyRun) -> Verdict {
    let rows = run.outcome.log.rows();
    let (first, last) = (rows[0].train_loss, rows[rows.len() - 1].train_loss);
    let ratio = last / first;
    let detail = format!("epoch 1 {first:.4}, epoch {} {last:.4}, ratio {ratio:.3} (< 0.5)", rows.len());
    if rows.len() == COPY_EPOCHS && ratio < 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn batching_arithmetic() -> Verdict {
    let pairs = copy_pairs(1050, 4, 1, 3, 5);
    let vocab = Vocabulary::build(&pairs, 1, 100).map_err(|e| e.to_string())?;
    let (examples, _) = prepare_examples(&pairs, &vocab, 3);
    let batches = make_batches(&examples, 100, Some(3)).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.iter().copied()).collect();
    seen.sort_unstable();
    let covers_once = seen == (0..1050).collect::<Vec<_>>();

    let config = TrainConfig {
        epochs: 1,
        batch_size: 100,
        max_len: 3,
        eval_fraction: 0.0,
        ..Default::default()
    };
    let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), 4, 4, 1), 1, None).map_err(|e| e.to_string())?;
    let outcome = train(&config, &examples, params, None).map_err(|e| e.to_string())?;
    let epoch = &outcome.epochs[0];
    let detail = format!(
        "{} batches ({}x100 + 1x{}), trainer saw {} batches and {} presentations",
        sizes.len(),
        sizes.iter().filter(|&&s| s == 100).count(),
        sizes.last().copied().unwrap_or(0),
        epoch.batches,
        epoch.presented
    );
    let expected: Vec<usize> = std::iter::repeat_n(100, 10).chain([50]).collect();
    if sizes == expected && covers_once && epoch.batches == 11 && epoch.presented == 1050 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn overfit_detector() -> Verdict {
    let rising = LossLog::from_eval_losses(&[3.0, 2.5, 2.0, 2.1, 2.2, 2.3]).map_err(|e| e.to_string())?;
    let falling = LossLog::from_eval_losses(&[3.0, 2.5, 2.0, 1.9, 1.8, 1.7]).map_err(|e| e.to_string())?;
    let flagged = detect_overfit(&rising, 2).map(|r| (r.flagged_epoch, r.best_epoch));
    let clean = detect_overfit(&falling, 2);
    let detail = format!("rising -> {flagged:?} (flag, best), falling -> {clean:?}");
    if flagged == Some((5, 3)) && clean.is_none() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture(name: &str) -> std::io::Result<BufReader<File>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    Ok(BufReader::new(File::open(path)?))
}

pub fn corpus_parsing() -> Verdict {
    let lines = fixture("movie_lines.txt").map_err(|e| e.to_string())?;
    let convs = fixture("movie_conversations.txt").map_err(|e| e.to_string())?;
    let parsed = parse_cornell(lines, convs).map_err(|e| e.to_string())?;
    let detail = format!("{} pairs, {} warnings", parsed.pairs.len(), parsed.warnings.len());
    if parsed.pairs.len() == 5 && parsed.warnings.len() == 2 {
        Ok(detail)
    } else {
        Err(format!("{detail}: {:?}", parsed.warnings))
    }
}

pub fn term_merging() -> Verdict {
    let lexicon = TermLexicon::new(["human immunodeficiency virus"]).map_err(|e| e.to_string())?;
    let tokens: Vec<String> = ["human", "immunodeficiency", "virus"].map(String::from).to_vec();
    let merged = lexicon.merge(&tokens);
    let detail = format!("{tokens:?} -> {merged:?}");
    if merged == ["human_immunodeficiency_virus"] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn checkpoint_round_trip(dir: &Path) -> Verdict {
    let vocab = Vocabulary::build(&copy_pairs(30, 9, 1, 4, 2), 1, 100).map_err(|e| e.to_string())?;
    let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), 7, 5, 2), 21, None).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.sqac");
    save_checkpoint(&params, &vocab, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bitwise = params.tensors().len() == loaded.params.tensors().len()
        && params.tensors().iter().zip(loaded.params.tensors()).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let same_vocab = loaded.vocab == vocab;

    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let bad = dir.join("bad.sqac");
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    fs::write(&bad, &wrong_magic).map_err(|e| e.to_string())?;
    let magic = load_checkpoint(&bad);
    fs::write(&bad, &bytes[..bytes.len() - 3]).map_err(|e| e.to_string())?;
    let truncated = load_checkpoint(&bad);
    let detail = format!(
        "{} tensors bitwise {bitwise}, vocabulary equal {same_vocab}, bad magic -> {}, truncated -> {}",
        params.tensors().len(),
        describe(&magic),
        describe(&truncated)
    );
    let ok = bitwise
        && same_vocab
        && matches!(magic, Err(CheckpointError::NotCheckpoint))
        && matches!(truncated, Err(CheckpointError::Corrupt(_)));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn describe<T>(r: &Result<T, CheckpointError>) -> String {
    match r {
        Ok(_) => "accepted".into(),
        Err(e) => format!("{e:?}").split('(').next().unwrap_or_default().to_string(),
    }
}

fn questions(run: &CopyRun) -> Vec<String> {
    copy_pairs(20, COPY_SYMBOLS, 1, COPY_MAX_LEN, COPY_SEED + 1000)
        .into_iter()
        .map(|p| p.question.join(" "))
        .chain(std::iter::once(run.vocab.tokens()[run.vocab.len() - 1].clone()))
        .collect()
}

pub fn determinism(first: &CopyRun, second: &CopyRun) -> Verdict {
    let diff = first.outcome.log.max_abs_diff(&second.outcome.log);
    let a = Engine::from_checkpoint(load_checkpoint(&first.checkpoint).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = Engine::from_checkpoint(load_checkpoint(&second.checkpoint).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let qs = questions(first);
    let mut mismatches = 0;
    for q in &qs {
        let (x, y) = (a.answer(q).map_err(|e| e.to_string())?, b.answer(q).map_err(|e| e.to_string())?);
        if x.answer_text != y.answer_text {
            mismatches += 1;
        }
    }
    let detail = format!(
        "loss logs max |diff| {} (<= 1e-6), {} of {} greedy answers differ",
        diff.map_or("n/a".into(), |d| format!("{d:.1e}")),
        mismatches,
        qs.len()
    );
    if diff.is_some_and(|d| d <= 1e-6) && mismatches == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn service_contract(run: &CopyRun) -> Verdict {
    let engine = Engine::from_checkpoint(load_checkpoint(&run.checkpoint).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let question = questions(run).remove(0);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        tokio::spawn(serve(listener, router(Arc::new(engine), None)?));
        let client = reqwest::Client::new();

        let body = serde_json::json!({ "question": question }).to_string();
        let handles: Vec<_> = (0..10)
            .map(|_| {
                let req = client.post(format!("{base}/ask")).body(body.clone());
                tokio::spawn(async move {
                    let resp = req.send().await.map_err(|e| e.to_string())?;
                    let status = resp.status().as_u16();
                    let json: serde_json::Value = resp.json().await.map_err(|e| e.to_string())?;
                    Ok::<_, String>((status, json["answer"].as_str().unwrap_or_default().to_string()))
                })
            })
            .collect();
        let mut answers = Vec::new();
        for h in handles {
            answers.push(h.await.map_err(|e| e.to_string())??);
        }
        let identical = answers.iter().all(|a| a == &answers[0]) && answers[0].0 == 200;

        let status = |body: &'static str| {
            let req = client.post(format!("{base}/ask")).body(body);
            async move { req.send().await.map(|r| r.status().as_u16()).map_err(|e| e.to_string()) }
        };
        let malformed = status("{\"question\": ").await?;
        let empty = status("{\"question\": \"\"}").await?;
        let detail = format!(
            "10 concurrent /ask identical {identical} (answer {:?}), malformed JSON -> {malformed}, empty question -> {empty}",
            answers[0].1
        );
        if identical && malformed == 400 && empty == 422 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

/// Runs every criterion in order, using `workdir` for checkpoints.
pub fn run_all(workdir: &Path) -> Vec<(&'static str, Verdict)> {
    let mut results = vec![
        ("gradient exactness", gradient_exactness()),
        ("closed-form loss", closed_form_loss()),
    ];
    let first = copy_task(&workdir.join("a"));
    results.push(("copy-task convergence", copy_convergence(&first)));
    results.push(("loss reduction", loss_reduction(&first)));
    results.push(("batching arithmetic", batching_arithmetic()));
    results.push(("overfitting detector", overfit_detector()));
    results.push(("corpus parsing", corpus_parsing()));
    results.push(("term merging", term_merging()));
    results.push(("checkpoint round-trip", checkpoint_round_trip(workdir)));
    let second = copy_task(&workdir.join("b"));
    results.push(("determinism", determinism(&first, &second)));
    results.push(("service contract", service_contract(&first)));
    results
}
