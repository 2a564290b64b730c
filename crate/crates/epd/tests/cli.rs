use std::fs;
use std::path::Path;

use epd::cli::run;
use quick_xml::events::Event;
use quick_xml::Reader;

const TINY: &str = "batch_size = 4
td.hidden = 8
td.fuse = 8
gg.hidden = 8
gg.feature = 8
energy.hidden = 8
energy.encoder_hidden = 8
energy.buffer_capacity = 32
denoiser.d_model = 8
denoiser.time_dim = 4
denoiser.ffn = 8
denoiser.layers = 1
stage.td.epochs = 2
stage.sc.epochs = 2
stage.pd.epochs = 2
stage.finetune.epochs = 2
synthetic.train = 8
synthetic.test = 4
";

fn epd(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("epd").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_scene(path: &Path, peds: i64, frames: i64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut s = String::new();
    for f in 0..frames {
        for i in 0..peds {
            s.push_str(&format!("{}\t{}\t{:.3}\t{:.3}\n", f * 10, i, 0.4 * f as f64, i as f64 + 0.02 * f as f64));
        }
    }
    fs::write(path, s).unwrap();
}

fn assert_well_formed(svg: &str) -> usize {
    let mut reader = Reader::from_str(svg);
    let mut depth = 0i64;
    let mut elements = 0;
    loop {
        match reader.read_event().expect("well-formed xml") {
            Event::Start(_) => {
                depth += 1;
                elements += 1;
            }
            Event::End(_) => depth -= 1,
            Event::Empty(_) => elements += 1,
            Event::Eof => break,
            _ => {}
        }
    }
    assert_eq!(depth, 0);
    elements
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(epd(&["--help"]).0, 0);
    assert_eq!(epd(&[]).0, 1);
    assert_eq!(epd(&["frobnicate"]).0, 1);
    assert_eq!(epd(&["eval"]).0, 1);
    assert_eq!(epd(&["eval", "x", "--k", "many"]).0, 1);
}

#[test]
fn missing_inputs_are_data_errors() {
    assert_eq!(epd(&["eval", "/no/such/checkpoint"]).0, 2);
    assert_eq!(epd(&["train", "/no/such/config.txt"]).0, 2);
    assert_eq!(epd(&["ingest", "/no/such/dir"]).0, 2);
}

#[test]
fn ingest_builds_then_reuses_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    write_scene(&tmp.path().join("eth/a.txt"), 2, 24);
    write_scene(&tmp.path().join("hotel/b.txt"), 1, 21);
    let (code, out) = epd(&["ingest", p(tmp.path())]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("cache built"), "{out}");
    assert!(out.contains("eth\teth/a\t10 windows"), "{out}");
    assert!(out.contains("hotel\thotel/b\t2 windows"), "{out}");
    let (code, out) = epd(&["ingest", p(tmp.path())]);
    assert_eq!(code, 0);
    assert!(out.contains("cache hit"), "{out}");
    assert_eq!(epd(&["ingest", p(tmp.path()), "--format", "frame,id,x"]).0, 1);
    assert_eq!(epd(&["ingest", p(tmp.path()), "--stride", "0"]).0, 1);
}

#[test]
fn train_eval_plot_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let runs = tmp.path().join("runs");
    let (code, out) = epd(&["train", p(&cfg), "--out", p(&runs)]);
    assert_eq!(code, 0, "{out}");
    for stage in ["td", "sc", "pd", "finetuned"] {
        assert!(runs.join(stage).join("manifest.json").is_file(), "{stage}");
        let losses = fs::read_to_string(runs.join(stage).join("losses.csv")).unwrap();
        assert_eq!(losses.lines().count(), 1 + 2 * 2, "{stage}");
    }
    let fin = runs.join("finetuned");

    let metrics = tmp.path().join("metrics");
    let (code, out) = epd(&["eval", p(&fin), "--split", "test", "--k", "5", "--seed", "3", "--out", p(&metrics)]);
    assert_eq!(code, 0, "{out}");
    let csv = fs::read_to_string(metrics.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dataset,variant,K,minADE,minFDE,windows,invocations"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[..3], ["synthetic", "full", "5"]);
    assert_eq!(row[5], "4");
    assert_eq!(row[6], "20");
    // same seed, same bytes
    let (_, first) = epd(&["eval", p(&fin), "--k", "5", "--seed", "3"]);
    let (_, second) = epd(&["eval", p(&fin), "--k", "5", "--seed", "3"]);
    assert_eq!(first, second);
    assert_eq!(first, csv);

    // an intermediate checkpoint cannot run the full model
    assert_eq!(epd(&["eval", p(&runs.join("sc"))]).0, 1);
    assert_eq!(epd(&["eval", p(&fin), "--split", "sideways"]).0, 1);
    // the synthetic source has no validation windows
    assert_eq!(epd(&["eval", p(&fin), "--split", "val"]).0, 2);

    let plots = tmp.path().join("plots");
    let (code, out) = epd(&["plot", p(&fin), "--window-id", "2", "--out", p(&plots)]);
    assert_eq!(code, 0, "{out}");
    let svg = fs::read_to_string(plots.join("window-2.svg")).unwrap();
    assert!(assert_well_formed(&svg) > 40);
    assert_eq!(svg.matches("plan-1sigma").count(), 12);
    assert_eq!(svg.matches("denoised-2sigma").count(), 12);
    assert_eq!(svg.matches(r#"class="sample""#).count(), 20);
    assert_eq!(svg.matches(r#"class="truth""#).count(), 1);
    let dist = fs::read_to_string(plots.join("window-2.csv")).unwrap();
    assert_eq!(dist.lines().next(), Some("t,mux,muy,sigx,sigy,rho"));
    assert_eq!(dist.lines().count(), 1 + 12);
    assert_eq!(epd(&["plot", p(&fin), "--window-id", "99", "--out", p(&plots)]).0, 1);

    let (code, out) = epd(&["bench", p(&fin), "--k", "2"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("denoiser rows per window: 5 vs 200"), "{out}");

    // corrupt parameters are a numeric failure
    let params = fin.join("params.bin");
    let mut bytes = fs::read(&params).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
    fs::write(&params, bytes).unwrap();
    assert_eq!(epd(&["eval", p(&fin)]).0, 3);
}

#[test]
fn ablation_rejects_an_empty_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, format!("{TINY}ablation.use_sc = false\nablation.use_pd = false\n")).unwrap();
    assert_eq!(epd(&["ablate", p(&cfg), "--out", p(&tmp.path().join("a"))]).0, 1);
    assert_eq!(epd(&["train", p(&cfg), "--out", p(&tmp.path().join("t"))]).0, 1);
}

#[test]
fn ablation_writes_three_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let out_dir = tmp.path().join("ablate");
    let (code, out) = epd(&["ablate", p(&cfg), "--out", p(&out_dir), "--k", "3"]);
    assert_eq!(code, 0, "{out}");
    for v in ["full", "sc-only", "pd-only"] {
        assert!(out_dir.join(v).join("params.bin").is_file());
        assert!(out.contains(v), "{out}");
    }
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(fs::read_to_string(out_dir.join("timing.csv")).unwrap().contains("wall_time_s"));
    // the PD-only checkpoint evaluates from noise, one reverse chain per window
    let (code, out) = epd(&["eval", p(&out_dir.join("pd-only")), "--k", "3"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.trim_end().ends_with(",400"), "{out}");
}
