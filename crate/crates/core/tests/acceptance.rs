//! Acceptance suite. Each test prints one PASS/FAIL line with its tolerance.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check_golden, oracle, skip, verdict};
use docicl::demos::{build_label_mapping, layout_question, render_formatting, render_hard, AnswerStyle, DemoCounts};
use docicl::evaluation::entity_f1;
use docicl::extraction::{parse_labeled_segments, parse_sroie_grouped, SroieAnswer};
use docicl::ingest::{load_cord, load_cord_split, load_funsd, load_sroie};
use docicl::llm::{AnswerKey, LlmClient, ScriptedBackend};
use docicl::ordering::{order_document, xy_cut, OrderingParams};
use docicl::perturb::{delete_char, perturb_document, PerturbOp, PerturbSpec};
use docicl::pipeline::{default_style, end_to_end, init_demoset, DemoConfig, RunConfig};
use docicl::prompting::{assemble_prompt, chunk_query, query_block, CharEstimator, OrderPolicy, DEFAULT_BUDGET};
use docicl::render::{PT_LABELS, PT_SROIE};
use docicl::similarity::{neighbor_pool, select_nearest_neighbors, LocalProvider};
use docicl::types::{BBox, Dataset, Document, LabelSchema, Segment, Split};
use docicl::updating::{update_hard_demos, UpdateOptions};

type Check = Result<String, String>;

fn fixture_run_config(k: usize) -> RunConfig {
    let mut cfg = RunConfig::for_dataset(Dataset::Funsd);
    cfg.update_iterations = k;
    cfg
}

/// Independent micro tally over (gold, pred) pairs, ignoring `other`.
fn brute_micro(pairs: &[(String, String)], other: &str) -> (u64, u64, u64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (g, p) in pairs {
        if g == p && g != other {
            tp += 1;
        }
        if g != p && p != other {
            fp += 1;
        }
        if g != p && g != other {
            fn_ += 1;
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (tp, fp, fn_, f1)
}

// ---------------------------------------------------------------------------

#[test]
fn a01_oracle_end_to_end() {
    let check = || -> Check {
        let t0 = Instant::now();
        let docs = load_funsd(&common::fixtures().join("funsd")).map_err(|e| e.to_string())?;
        ensure!(docs.len() == 6, "fixture has {} documents", docs.len());
        let schema = LabelSchema::funsd();
        let client = oracle(&docs, &schema);
        let run = end_to_end(&docs, &schema, &LocalProvider, &client, &fixture_run_config(3), &CharEstimator)
            .map_err(|e| e.to_string())?;
        let elapsed = t0.elapsed().as_secs_f64();
        ensure!(run.trace.steps.len() == 3, "trace has {} steps", run.trace.steps.len());
        ensure!(run.report.micro.f1 == 1.0, "micro F1 {}", run.report.micro.f1);
        ensure!(elapsed < 10.0, "took {elapsed:.2}s");
        Ok(format!("micro F1 = {} over {} segments in {elapsed:.2}s", run.report.micro.f1, run.report.n_segments))
    };
    verdict("oracle-e2e", "fixture pipeline with oracle backend", "F1 == 1.0 exactly; < 10 s", check());
}

/// Rotate a FUNSD label to a different one.
fn corrupt(label: &str) -> &'static str {
    match label {
        "question" => "answer",
        "answer" => "header",
        "header" => "other",
        _ => "question",
    }
}

#[test]
fn a02_degradation_end_to_end() {
    let check = || -> Check {
        let docs = load_funsd(&common::fixtures().join("funsd")).map_err(|e| e.to_string())?;
        let schema = LabelSchema::funsd();
        // Every fifth test segment, in (doc_id, segment id) order, gets a wrong label.
        let mut test_segs: Vec<(String, Segment)> = docs
            .iter()
            .filter(|d| d.split == Split::Test)
            .flat_map(|d| d.segments.iter().map(move |s| (d.doc_id.clone(), s.clone())))
            .collect();
        test_segs.sort_by(|a, b| (&a.0, a.1.id.parse::<u32>().unwrap()).cmp(&(&b.0, b.1.id.parse::<u32>().unwrap())));
        let mut key = AnswerKey::from_documents(&docs, "other");
        let mut pairs = Vec::new();
        let mut corrupted = 0;
        for (i, (_, s)) in test_segs.iter().enumerate() {
            let gold = s.gold_label.clone().unwrap();
            let pred = if i % 5 == 4 {
                corrupted += 1;
                corrupt(&gold).to_string()
            } else {
                gold.clone()
            };
            key.set(&s.text, s.bbox, &pred);
            pairs.push((gold, pred));
        }
        ensure!(corrupted * 5 == test_segs.len(), "{corrupted} of {} corrupted", test_segs.len());
        let (tp, fp, fn_, expected) = brute_micro(&pairs, "other");
        let client = LlmClient::new(ScriptedBackend::oracle(key), "degraded");
        let run = end_to_end(&docs, &schema, &LocalProvider, &client, &fixture_run_config(3), &CharEstimator)
            .map_err(|e| e.to_string())?;
        let got = run.report.micro.f1;
        ensure!((got - expected).abs() <= 1e-9, "F1 {got} vs brute force {expected}");
        Ok(format!("{corrupted}/{} segments corrupted: F1 {got:.12} (tp {tp} fp {fp} fn {fn_})", test_segs.len()))
    };
    verdict("degradation-e2e", "20% mislabeling backend matches brute-force F1", "|dF1| <= 1e-9", check());
}

#[test]
fn a03_evaluation_oracle() {
    let check = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE7A1);
        for inst in 0..500 {
            let n_labels = rng.gen_range(1..=5usize);
            let mut labels: Vec<String> = (0..n_labels - 1).map(|i| format!("l{i}")).collect();
            labels.push("other".into());
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            let schema = LabelSchema::natural(Dataset::Custom, &refs, "other", true);
            let n_docs = rng.gen_range(1..=3usize);
            let mut gold_docs = Vec::new();
            let mut pred_docs = Vec::new();
            let mut pairs = Vec::new();
            for d in 0..n_docs {
                let n = rng.gen_range(0..=20usize);
                let mut gs = Vec::new();
                let mut ps = Vec::new();
                for i in 0..n {
                    let g = labels[rng.gen_range(0..labels.len())].clone();
                    let p = labels[rng.gen_range(0..labels.len())].clone();
                    let b = BBox::new(0, i as u32, 10, i as u32 + 1).unwrap();
                    gs.push(Segment::new(i.to_string(), &format!("t{i}"), b).with_gold(g.clone()));
                    let mut s = Segment::new(i.to_string(), &format!("t{i}"), b);
                    s.predicted_label = Some(p.clone());
                    ps.push(s);
                    pairs.push((g, p));
                }
                gold_docs.push(Document::new(format!("d{d}"), Dataset::Custom, Split::Test, gs));
                pred_docs.push(Document::new(format!("d{d}"), Dataset::Custom, Split::Test, ps));
            }
            let r = entity_f1(&pred_docs, &gold_docs, &schema).map_err(|e| e.to_string())?;
            let (tp, fp, fn_, f1) = brute_micro(&pairs, "other");
            ensure!(
                (r.micro.tp, r.micro.fp, r.micro.fn_) == (tp, fp, fn_),
                "instance {inst}: counts {:?} vs {:?}",
                (r.micro.tp, r.micro.fp, r.micro.fn_),
                (tp, fp, fn_)
            );
            ensure!((r.micro.f1 - f1).abs() <= 1e-12, "instance {inst}: F1 {} vs {f1}", r.micro.f1);
            for l in labels.iter().filter(|l| *l != "other") {
                let only: Vec<(String, String)> = pairs
                    .iter()
                    .filter(|(g, p)| g == l || p == l)
                    .map(|(g, p)| {
                        (
                            if g == l { g.clone() } else { "other".into() },
                            if p == l { p.clone() } else { "other".into() },
                        )
                    })
                    .collect();
                let (tp, fp, fn_, _) = brute_micro(&only, "other");
                let s = r.label(l).ok_or(format!("instance {inst}: no row for {l}"))?;
                ensure!((s.tp, s.fp, s.fn_) == (tp, fp, fn_), "instance {inst}: label {l} counts differ");
            }
        }
        Ok("500 instances: counts identical, micro F1 within 1e-12".into())
    };
    verdict("eval-oracle", "entity_f1 equals brute-force tally", "counts exact; F1 <= 1e-12", check());
}

fn seg(id: usize, x0: u32, y0: u32, x1: u32, y1: u32) -> Segment {
    Segment::new(format!("s{id:02}"), &format!("w{id}"), BBox::new(x0, y0, x1, y1).unwrap())
}

#[test]
fn a04_xy_cut_properties() {
    let check = || -> Check {
        let p = OrderingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0x0C07);
        for inst in 0..200 {
            // Random layout: permutation, determinism, translation invariance.
            let n = rng.gen_range(1..=30usize);
            let segs: Vec<Segment> = (0..n)
                .map(|i| {
                    let (x, y) = (rng.gen_range(0..800), rng.gen_range(0..900));
                    seg(i, x, y, x + rng.gen_range(5..150), y + rng.gen_range(5..60))
                })
                .collect();
            let order = xy_cut(&segs, &p);
            let mut sorted = order.clone();
            sorted.sort();
            let mut ids: Vec<String> = segs.iter().map(|s| s.id.clone()).collect();
            ids.sort();
            ensure!(sorted == ids, "layout {inst}: output is not a permutation");
            ensure!(xy_cut(&segs, &p) == order, "layout {inst}: nondeterministic");
            let max_x = segs.iter().map(|s| s.bbox.x1()).max().unwrap();
            let max_y = segs.iter().map(|s| s.bbox.y1()).max().unwrap();
            let (dx, dy) = (rng.gen_range(0..=1000 - max_x), rng.gen_range(0..=1000 - max_y));
            let moved: Vec<Segment> = segs
                .iter()
                .map(|s| {
                    let b = s.bbox;
                    let mut t = s.clone();
                    t.bbox = BBox::new(b.x0() + dx, b.y0() + dy, b.x1() + dx, b.y1() + dy).unwrap();
                    t
                })
                .collect();
            ensure!(xy_cut(&moved, &p) == order, "layout {inst}: not translation invariant (dx {dx}, dy {dy})");

            // 2x2 grid: row-major when the row gap is at least the column gap.
            let (w, h) = (rng.gen_range(40..250u32), rng.gen_range(15..80u32));
            let (cg, rg) = (rng.gen_range(10..120u32), rng.gen_range(10..120u32));
            let (ox, oy) = (rng.gen_range(0..200u32), rng.gen_range(0..300u32));
            let cells = [(0, 0), (1, 0), (0, 1), (1, 1)];
            let mut grid: Vec<Segment> = cells
                .iter()
                .enumerate()
                .map(|(i, &(c, r))| {
                    let x = ox + c * (w + cg);
                    let y = oy + r * (h + rg);
                    seg(i, x, y, x + w, y + h)
                })
                .collect();
            grid.shuffle(&mut rng);
            let expect: Vec<&str> =
                if rg >= cg { vec!["s00", "s01", "s02", "s03"] } else { vec!["s00", "s02", "s01", "s03"] };
            ensure!(
                xy_cut(&grid, &p) == expect,
                "grid {inst} (row gap {rg}, column gap {cg}): {:?}",
                xy_cut(&grid, &p)
            );

            // Two columns: left column top to bottom, then the right one.
            let col_gap = rng.gen_range(60..200u32);
            let cw = rng.gen_range(60..300u32);
            let mut cols = Vec::new();
            let mut expect = Vec::new();
            let mut id = 0;
            for c in 0..2u32 {
                let mut y = rng.gen_range(0..60u32);
                for _ in 0..rng.gen_range(1..8) {
                    let hh = rng.gen_range(10..40u32);
                    let x0 = 20 + c * (cw + col_gap);
                    cols.push(seg(id, x0, y, x0 + rng.gen_range(10..=cw), y + hh));
                    expect.push(format!("s{id:02}"));
                    id += 1;
                    y += hh + rng.gen_range(0..50u32);
                }
            }
            cols.shuffle(&mut rng);
            ensure!(xy_cut(&cols, &p) == expect, "two-column layout {inst}: {:?}", xy_cut(&cols, &p));
        }
        Ok("200 random layouts, 200 grids, 200 two-column pages".into())
    };
    verdict("xy-cut", "permutation, determinism, translation, grid and two-column orders", "exact", check());
}

fn random_doc(rng: &mut ChaCha8Rng, id: &str, split: Split, vocab: &[&str]) -> Document {
    let n = rng.gen_range(1..=8usize);
    let segs = (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..rng.gen_range(1..5)).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
            Segment::new(i.to_string(), &words.join(" "), BBox::new(0, 20 * i as u32, 100, 20 * i as u32 + 10).unwrap())
        })
        .collect();
    Document::new(id, Dataset::Funsd, split, segs)
}

#[test]
fn a05_neighbor_selection() {
    let check = || -> Check {
        let vocab = [
            "date", "total", "invoice", "memo", "fax", "to", "from", "amount", "cash", "receipt", "name", "form",
            "page",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0x4E4E);
        for inst in 0..100 {
            let train: Vec<Document> = (0..rng.gen_range(1..8))
                .map(|i| random_doc(&mut rng, &format!("tr{i}"), Split::Train, &vocab))
                .collect();
            let test: Vec<Document> = (0..rng.gen_range(1..5))
                .map(|i| random_doc(&mut rng, &format!("te{i}"), Split::Test, &vocab))
                .collect();
            let got = select_nearest_neighbors(&train, &test, &LocalProvider, 2).map_err(|e| e.to_string())?;
            let emb = |d: &Document| LocalProvider.embed_one(&d.full_text()).values;
            for q in &test {
                let qv = emb(q);
                let mut best: Option<(f64, &str)> = None;
                for t in &train {
                    let tv = emb(t);
                    let dot: f64 = qv.iter().zip(&tv).map(|(a, b)| a * b).sum();
                    let nq = qv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nt = tv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let c = dot / (nq * nt);
                    if best
                        .is_none_or(|(bc, bid)| c > bc + 1e-12 || ((c - bc).abs() <= 1e-12 && t.doc_id.as_str() < bid))
                    {
                        best = Some((c, &t.doc_id));
                    }
                }
                let (bc, bid) = best.unwrap();
                let n = &got[&q.doc_id];
                ensure!(n.train_doc_id == bid, "instance {inst}, {}: picked {} vs {bid}", q.doc_id, n.train_doc_id);
                ensure!((n.score - bc).abs() <= 1e-9, "instance {inst}: score {} vs {bc}", n.score);
            }
        }
        Ok("100 instances agree with all-pairs cosine argmax".into())
    };
    verdict("neighbors", "selection equals brute-force argmax", "ids exact; cosine <= 1e-9", check());
}

#[test]
fn a06_render_parse_identity() {
    let check = || -> Check {
        let alphabet: Vec<char> = "abcXYZ019 .,:;-/\"\\{}[]()#$%&'".chars().collect();
        let labels = ["question", "answer", "header", "other"];
        let sroie_labels = ["company", "address", "total", "date", "other"];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        for inst in 0..300 {
            let n = rng.gen_range(1..=12usize);
            let mut segs = Vec::new();
            for i in 0..n {
                let len = rng.gen_range(1..=14);
                let raw: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
                let (x, y) = (rng.gen_range(0..900u32), rng.gen_range(0..900u32));
                let b = BBox::new(x, y, x + rng.gen_range(1..100), y + rng.gen_range(1..100)).unwrap();
                let s = Segment::new(i.to_string(), &raw, b);
                if s.text.is_empty() {
                    continue;
                }
                let pool: &[&str] = if inst % 2 == 0 { &labels } else { &sroie_labels };
                segs.push(s.with_gold(pool[rng.gen_range(0..pool.len())]));
            }
            if segs.is_empty() {
                continue;
            }
            let gold: Vec<(String, BBox, String)> =
                segs.iter().map(|s| (s.text.clone(), s.bbox, s.gold_label.clone().unwrap())).collect();
            let queries: Vec<(String, BBox)> = segs.iter().map(|s| (s.text.clone(), s.bbox)).collect();
            let blocks = [
                ("formatting", render_formatting(&segs, AnswerStyle::Labeled, "other"), true, true),
                ("hard", render_hard(&segs, AnswerStyle::Labeled, "other"), true, true),
                ("layout", layout_question(&segs, "other"), true, false),
                ("query", query_block(&segs, AnswerStyle::Labeled), false, true),
            ];
            for (name, text, has_entities, has_queries) in blocks {
                let out = parse_labeled_segments(&text);
                ensure!(out.diagnostics.is_empty(), "doc {inst} {name}: diagnostics {:?}", out.diagnostics);
                let ents: Vec<(String, BBox, String)> =
                    out.entities.iter().map(|e| (e.text.clone(), e.bbox.unwrap(), e.label.clone())).collect();
                let qs: Vec<(String, BBox)> = out.queries.iter().map(|q| (q.text.clone(), q.bbox.unwrap())).collect();
                ensure!(ents == if has_entities { gold.clone() } else { vec![] }, "doc {inst} {name}: entities differ");
                ensure!(qs == if has_queries { queries.clone() } else { vec![] }, "doc {inst} {name}: queries differ");
            }
            let answer = SroieAnswer::from_gold(&segs);
            let (parsed, diags) = parse_sroie_grouped(&answer.render());
            ensure!(diags.is_empty() && parsed == answer, "doc {inst}: grouped answer does not round-trip");
        }
        Ok("300 documents: formatting, hard, layout, query and grouped blocks round-trip".into())
    };
    verdict("render-parse", "rendered blocks re-parse to their source", "exact", check());
}

fn golden_prompt(dataset: Dataset, docs: Vec<Document>) -> Result<String, String> {
    let schema = LabelSchema::for_dataset(dataset);
    let docs: Vec<Document> = docs.iter().map(|d| order_document(d, &OrderingParams::default())).collect();
    let (train, test): (Vec<Document>, Vec<Document>) = docs.into_iter().partition(|d| d.split == Split::Train);
    let nb = select_nearest_neighbors(&train, &test, &LocalProvider, 1).map_err(|e| e.to_string())?;
    let pool: Vec<Document> =
        neighbor_pool(&nb).iter().map(|id| train.iter().find(|d| &d.doc_id == id).unwrap().clone()).collect();
    let client = oracle(&[train.clone(), test.clone()].concat(), &schema);
    let style = default_style(dataset);
    let cfg = DemoConfig { style, ..DemoConfig::default() };
    let set = init_demoset(&pool, &schema, &client, &cfg, &CharEstimator).map_err(|e| e.to_string())?;
    let q = &test[0];
    let chunk = &chunk_query(&q.segments, DEFAULT_BUDGET, 0, &CharEstimator, style).map_err(|e| e.to_string())?[0];
    let a = assemble_prompt(&set, chunk, OrderPolicy::Mhlf, DEFAULT_BUDGET * 4, &CharEstimator)
        .map_err(|e| e.to_string())?;
    let b = assemble_prompt(&set, chunk, OrderPolicy::Mlhf, DEFAULT_BUDGET * 4, &CharEstimator)
        .map_err(|e| e.to_string())?;
    let name = dataset.to_string().to_lowercase();
    ensure!(a.text.starts_with(&set.mapping.rendered), "{name}: mapping block is not first");
    ensure!(a.text.ends_with(&query_block(chunk, style)), "{name}: query block is not last");
    let marker = if dataset == Dataset::Sroie { PT_SROIE } else { PT_LABELS };
    ensure!(a.text.contains(marker), "{name}: question marker missing");
    ensure!(a.dropped.is_empty(), "{name}: blocks dropped");
    let mut x: Vec<&str> = a.blocks.iter().map(|b| b.text.as_str()).collect();
    let mut y: Vec<&str> = b.blocks.iter().map(|b| b.text.as_str()).collect();
    ensure!(x != y, "{name}: orders coincide");
    x.sort_unstable();
    y.sort_unstable();
    ensure!(x == y && a.query == b.query, "{name}: M-L-H-F is not a block permutation of M-H-L-F");
    check_golden(&format!("{name}_mhlf.txt"), &a.text)?;
    check_golden(&format!("{name}_mlhf.txt"), &b.text)?;
    Ok(format!("{name} {} blocks", a.blocks.len()))
}

#[test]
fn a07_prompt_goldens() {
    let check = || -> Check {
        let out = [
            golden_prompt(Dataset::Funsd, common::funsd())?,
            golden_prompt(Dataset::Cord, common::cord())?,
            golden_prompt(Dataset::Sroie, common::sroie())?,
        ];
        Ok(out.join(", "))
    };
    verdict("prompt-goldens", "M-H-L-F goldens; M-L-H-F is a permutation", "byte-exact", check());
}

#[test]
fn a08_updating_trace() {
    let check = || -> Check {
        let schema = LabelSchema::funsd();
        let docs = common::funsd();
        let pool: Vec<Document> = docs
            .iter()
            .filter(|d| d.split == Split::Train)
            .map(|d| order_document(d, &OrderingParams::default()))
            .collect();
        let target = pool[2].doc_id.clone();
        let mut key = AnswerKey::from_documents(&pool, "other");
        for s in &pool[2].segments {
            key.set(&s.text, s.bbox, corrupt(s.gold_label.as_deref().unwrap()));
        }
        // Brute force: the segments the backend gets wrong are exactly the target's.
        let wrong: BTreeSet<String> = pool
            .iter()
            .flat_map(|d| d.segments.iter().map(move |s| (d, s)))
            .filter(|(_, s)| key.get(&s.text, &s.bbox) != s.gold_label.as_deref())
            .map(|(d, _)| d.doc_id.clone())
            .collect();
        ensure!(wrong == BTreeSet::from([target.clone()]), "errors not confined to {target}: {wrong:?}");
        let client = LlmClient::new(ScriptedBackend::oracle(key), "adversarial");
        let cfg =
            DemoConfig { counts: DemoCounts { n_hard: 2, n_layout: 1, n_formatting: 2 }, ..DemoConfig::default() };
        let set = init_demoset(&pool, &schema, &client, &cfg, &CharEstimator).map_err(|e| e.to_string())?;
        let k = 4;
        let opts = UpdateOptions::default();
        let (updated, trace) =
            update_hard_demos(&set, &pool, &client, k, &schema, &opts, &CharEstimator).map_err(|e| e.to_string())?;
        ensure!(trace.steps.len() == k, "trace length {}", trace.steps.len());
        ensure!(trace.steps.iter().enumerate().all(|(i, s)| s.iteration == i), "iteration indexes not consecutive");
        for s in &trace.steps {
            let w = s.appended.as_ref().ok_or("iteration appended nothing")?;
            ensure!(w.doc_id == target, "iteration {} appended a window from {}", s.iteration, w.doc_id);
        }
        ensure!(updated.hard.len() <= set.counts.n_hard, "hard list exceeds capacity");
        let (same, empty) =
            update_hard_demos(&set, &pool, &client, 0, &schema, &opts, &CharEstimator).map_err(|e| e.to_string())?;
        ensure!(same == set && empty.steps.is_empty(), "k = 0 changed the set");

        // Reproduce a recorded CLI update run from its manifest.
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let run = |args: &[&str]| -> Result<PathBuf, String> {
            let mut argv = vec!["docicl".to_string()];
            argv.extend(args.iter().map(|s| s.to_string()));
            docicl::cli::main_with(argv).map(|o| o.out_dir).map_err(|e| format!("{e:#}"))
        };
        let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
        let funsd_root = common::fixtures().join("funsd");
        run(&["--out", &d("ing"), "ingest", "--dataset", "FUNSD", "--root", funsd_root.to_str().unwrap()])?;
        let docs_file = d("ing/documents.jsonl");
        run(&["--out", &d("nb"), "neighbors", "--train", &docs_file, "--test", &docs_file])?;
        let common_args = ["--backend", "oracle", "--n-hard", "2", "--n-layout", "1", "--n-formatting", "2"];
        let mut init = common_args.to_vec();
        let (out_init, nbf) = (d("init"), d("nb/neighbors.json"));
        init.extend(["--out", &out_init, "demos", "init", "--docs", &docs_file, "--neighbors", &nbf]);
        run(&init)?;
        let mut upd = common_args.to_vec();
        let (out_upd, ds) = (d("upd"), d("init/demoset.json"));
        upd.extend([
            "-k",
            "3",
            "--out",
            &out_upd,
            "demos",
            "update",
            "--demoset",
            &ds,
            "--docs",
            &docs_file,
            "--neighbors",
            &nbf,
        ]);
        run(&upd)?;
        let re = docicl::cli::rerun(
            &dir.path().join("upd/manifest.json"),
            Some(dir.path().join("upd_re")),
            Path::new("runs"),
        )
        .map_err(|e| format!("{e:#}"))?;
        let a = std::fs::read(dir.path().join("upd/demoset.json")).map_err(|e| e.to_string())?;
        let b = std::fs::read(re.out_dir.join("demoset.json")).map_err(|e| e.to_string())?;
        ensure!(a == b, "rerun demoset differs");
        Ok(format!("{k}/{k} windows from {target}; k=0 identity; manifest rerun byte-identical"))
    };
    verdict("updating-trace", "adversarial windows, k=0 identity, manifest rerun", "exact", check());
}

/// Smallest k with P(X <= k) >= q for X ~ Binomial(n, p).
fn binom_quantile(n: u64, p: f64, q: f64) -> u64 {
    let mut logpmf = (n as f64) * (1.0 - p).ln();
    let mut cdf = logpmf.exp();
    let mut k = 0;
    while cdf < q && k < n {
        logpmf += ((n - k) as f64).ln() - ((k + 1) as f64).ln() + p.ln() - (1.0 - p).ln();
        k += 1;
        cdf += logpmf.exp();
    }
    k
}

fn hundred_words(seed: u64) -> Document {
    let stems = ["open", "note", "value", "level", "entry", "period", "sheet", "center", "memo", "phone"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<Segment> = (0..10)
        .map(|i| {
            let words: Vec<String> =
                (0..10).map(|_| format!("{}{}", stems[rng.gen_range(0..stems.len())], rng.gen_range(0..9))).collect();
            Segment::new(i.to_string(), &words.join(" "), BBox::new(0, 30 * i, 500, 30 * i + 20).unwrap())
                .with_gold("other")
        })
        .collect();
    Document::new(format!("w{seed}"), Dataset::Funsd, Split::Test, segs)
}

#[test]
fn a09_perturbation() {
    let check = || -> Check {
        ensure!(delete_char("name", 1) == "nme", "forced deletion gave {}", delete_char("name", 1));
        let forced = PerturbSpec { p_char_delete: 1.0, p_substitute: 0.0, ..PerturbSpec::default() };
        let d = Document::new(
            "n",
            Dataset::Funsd,
            Split::Test,
            vec![Segment::new("0", "name", BBox::new(0, 0, 10, 10).unwrap()).with_gold("question")],
        );
        let outcomes: BTreeSet<String> = (0..64)
            .map(|s| perturb_document(&d, &PerturbSpec { seed: s, ..forced.clone() }).0.segments[0].text.clone())
            .collect();
        ensure!(outcomes.contains("nme"), "forced deletion never yields nme: {outcomes:?}");
        ensure!(outcomes.iter().all(|o| o.len() == 3 && o.starts_with('n')), "unexpected outcomes {outcomes:?}");

        let spec = PerturbSpec { seed: 17, ..PerturbSpec::default() };
        let (mut subs, mut dels, mut total) = (0u64, 0u64, 0u64);
        for fixture in 0..100u64 {
            let doc = hundred_words(fixture);
            let words: usize = doc.segments.iter().map(|s| s.text.split(' ').count()).sum();
            ensure!(words == 100, "fixture has {words} words");
            let (a, log) = perturb_document(&doc, &spec);
            let (b, log_b) = perturb_document(&doc, &spec);
            ensure!(a == b && log == log_b, "fixture {fixture}: not deterministic");
            ensure!(a.segments.len() == doc.segments.len(), "segment count changed");
            for (x, y) in a.segments.iter().zip(&doc.segments) {
                ensure!(
                    x.id == y.id && x.bbox == y.bbox && x.gold_label == y.gold_label,
                    "fixture {fixture}: structure changed"
                );
                ensure!(
                    x.text.split(' ').count() == y.text.split(' ').count(),
                    "fixture {fixture}: word count changed"
                );
            }
            total += words as u64;
            subs += log.entries.iter().filter(|e| e.op == PerturbOp::Substitute).count() as u64;
            dels += log.entries.iter().filter(|e| e.op == PerturbOp::Delete).count() as u64;
        }
        let mut lines = Vec::new();
        for (name, count, p) in [("substituted", subs, spec.p_substitute), ("deleted", dels, spec.p_char_delete)] {
            let (lo, hi) = (binom_quantile(total, p, 0.005), binom_quantile(total, p, 0.995));
            ensure!((lo..=hi).contains(&count), "{name} {count} outside [{lo}, {hi}]");
            lines.push(format!("{name} {count} in [{lo}, {hi}]"));
        }
        Ok(format!("name->nme; {total} words: {}", lines.join(", ")))
    };
    verdict("perturbation", "forced deletion, structure, determinism, binomial bounds", "99% binomial", check());
}

fn dataset_root(env: &str, default: &str) -> Option<PathBuf> {
    let p = std::env::var_os(env)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("..").join("..").join("data").join(default));
    p.is_dir().then_some(p)
}

fn split_counts(docs: &[Document]) -> (usize, usize) {
    let train = docs.iter().filter(|d| d.split == Split::Train).count();
    (train, docs.len() - train)
}

#[test]
fn a10_dataset_counts() {
    let mut ran = false;
    if let Some(root) = dataset_root("DOCICL_FUNSD", "funsd") {
        ran = true;
        let r = load_funsd(&root).map(|d| split_counts(&d)).map_err(|e| e.to_string());
        verdict(
            "counts-funsd",
            "FUNSD 149/50",
            "exact",
            r.and_then(|c| if c == (149, 50) { Ok(format!("{c:?}")) } else { Err(format!("{c:?}")) }),
        );
    }
    if let Some(root) = dataset_root("DOCICL_CORD", "cord") {
        ran = true;
        let r = (|| -> Result<(usize, usize, usize), String> {
            let (tr, te) = split_counts(&load_cord(&root).map_err(|e| e.to_string())?);
            let dev = load_cord_split(&root, "dev").map_err(|e| e.to_string())?.len();
            Ok((tr, dev, te))
        })();
        verdict(
            "counts-cord",
            "CORD 800/100/100",
            "exact",
            r.and_then(|c| if c == (800, 100, 100) { Ok(format!("{c:?}")) } else { Err(format!("{c:?}")) }),
        );
    }
    if let Some(root) = dataset_root("DOCICL_SROIE", "sroie") {
        ran = true;
        let r = load_sroie(&root).map(|d| split_counts(&d)).map_err(|e| e.to_string());
        verdict(
            "counts-sroie",
            "SROIE 626/347",
            "exact",
            r.and_then(|c| if c == (626, 347) { Ok(format!("{c:?}")) } else { Err(format!("{c:?}")) }),
        );
    }
    if !ran {
        skip(
            "dataset-counts",
            "FUNSD 149/50, CORD 800/100/100, SROIE 626/347",
            "datasets absent; set DOCICL_FUNSD / DOCICL_CORD / DOCICL_SROIE",
        );
    }
}

/// Needs `DOCICL_LIVE_BASE_URL` and `DOCICL_LIVE_MODEL` (plus the API key
/// variable the config names). Run with `cargo test -- --ignored`.
#[test]
#[ignore]
fn a11_live_smoke() {
    let check = || -> Check {
        let base = std::env::var("DOCICL_LIVE_BASE_URL").map_err(|_| "DOCICL_LIVE_BASE_URL not set")?;
        let model = std::env::var("DOCICL_LIVE_MODEL").map_err(|_| "DOCICL_LIVE_MODEL not set")?;
        let docs = match dataset_root("DOCICL_FUNSD", "funsd") {
            Some(r) => load_funsd(&r).map_err(|e| e.to_string())?,
            None => common::funsd(),
        };
        let mut subset: Vec<Document> = docs.iter().filter(|d| d.split == Split::Train).take(3).cloned().collect();
        subset.extend(docs.iter().filter(|d| d.split == Split::Test).take(2).cloned());
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let file = dir.path().join("subset.jsonl");
        docicl::ingest::write_normalized(&subset, &file).map_err(|e| e.to_string())?;
        let out = dir.path().join("run");
        let argv: Vec<String> = [
            "docicl",
            "--backend",
            "http",
            "--base-url",
            &base,
            "--model",
            &model,
            "-k",
            "1",
            "--out",
            out.to_str().unwrap(),
            "pipeline",
            "--docs",
            file.to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let o = docicl::cli::main_with(argv).map_err(|e| format!("{e:#}"))?;
        let m = &o.manifest;
        for key in ["neighbors", "demoset", "trace", "predictions", "report"] {
            ensure!(m.outputs.contains_key(key), "manifest lacks output {key}");
        }
        ensure!(m.backend_id.is_some() && m.demoset_hash.is_some(), "manifest incomplete");
        let preds = docicl::ingest::load_predictions(&out.join("predictions.jsonl")).map_err(|e| e.to_string())?;
        let n: usize = preds.iter().map(|d| d.segments.len()).sum();
        let unmatched = *m.diagnostics.get("unmatched").unwrap_or(&0) as usize;
        let parsed = 1.0 - unmatched as f64 / n as f64;
        ensure!(parsed >= 0.8, "only {:.1}% of segments parsed", parsed * 100.0);
        Ok(format!("{:.1}% of {n} segments parsed", parsed * 100.0))
    };
    verdict("live-smoke", "5-document run against a live endpoint", ">= 80% parsed", check());
}

#[test]
fn a12_label_mapping_sentences() {
    let check = || -> Check {
        let f = build_label_mapping(&LabelSchema::funsd()).rendered;
        ensure!(
            f.trim_end() == r#"There are four labels for selection, "question", "answer", "header", and "other"."#,
            "FUNSD mapping {f:?}"
        );
        let c = build_label_mapping(&LabelSchema::cord()).rendered;
        ensure!(c.lines().any(|l| l == "MENU.NM : name of menu"), "CORD mapping lacks MENU.NM");
        ensure!(c.lines().count() == 30, "CORD mapping has {} lines", c.lines().count());
        Ok("FUNSD sentence and CORD lines match".into())
    };
    verdict("label-mapping", "mapping blocks as printed", "byte-exact", check());
}
