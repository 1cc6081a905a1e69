use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use traffic_lm::codec::tokenize_flow;
use traffic_lm::flow::Flow;
use traffic_lm::pcap::write_pcap_to_vec;
use traffic_lm::synth::{class_corpus, fixture_corpus, overfit_corpus};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_traffic-lm")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_flows(dir: &Path, prefix: &str, flows: &[Flow]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in flows.iter().enumerate() {
        let bytes = write_pcap_to_vec(f.packets[0].linktype, &f.packets).unwrap();
        std::fs::write(dir.join(format!("{prefix}_{i:03}.pcap")), bytes).unwrap();
    }
    dir.to_path_buf()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, value.to_string()).unwrap();
    path
}

#[test]
fn tokenize_then_detokenize_reproduces_captures() {
    let t = tempfile::tempdir().unwrap();
    let fixtures = write_flows(&t.path().join("fixtures"), "flow", &fixture_corpus(24, 12, 3));
    let shards = t.path().join("shards");
    let back = t.path().join("back");
    ok(&["tokenize", "--in", p(&fixtures), "--out", p(&shards)]);
    ok(&["detokenize", "--in", p(&shards), "--out", p(&back)]);
    for entry in std::fs::read_dir(&fixtures).unwrap() {
        let path = entry.unwrap().path();
        let original = std::fs::read(&path).unwrap();
        let rebuilt = std::fs::read(back.join(path.file_name().unwrap())).unwrap();
        assert_eq!(original, rebuilt, "{}", path.display());
    }
}

#[test]
fn split_flows_writes_one_capture_per_flow() {
    let t = tempfile::tempdir().unwrap();
    let flows = fixture_corpus(5, 6, 9);
    let mut records: Vec<_> = flows.iter().filter(|f| f.packets[0].linktype == 1).flat_map(|f| f.packets.clone()).collect();
    let n_flows = flows.iter().filter(|f| f.packets[0].linktype == 1).count();
    records.sort_by_key(|r| r.timestamp);
    let input = t.path().join("mixed.pcap");
    std::fs::write(&input, write_pcap_to_vec(1, &records).unwrap()).unwrap();
    let out = t.path().join("flows");
    ok(&["split-flows", "--in", p(&input), "--out", p(&out), "--deterministic"]);
    let pcaps = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pcap")).count();
    assert_eq!(pcaps, n_flows);
    assert_eq!(json(&out.join("split_report.json"))["result"][0]["flows"], n_flows);
}

#[test]
fn pretrain_overfits_then_generates_valid_flows() {
    let t = tempfile::tempdir().unwrap();
    let fixtures = write_flows(&t.path().join("fixtures"), "flow", &overfit_corpus(7));
    let shards = t.path().join("shards");
    ok(&["tokenize", "--in", p(&fixtures), "--out", p(&shards)]);
    let cfg = write_config(
        t.path(),
        serde_json::json!({
            "seed": 1,
            "train": { "steps": 2000, "target_accuracy": 0.99, "eval_interval": 50 },
            "generate": { "count": 4, "sampling": { "k": 1 } }
        }),
    );
    let model_dir = t.path().join("model");
    ok(&["pretrain", "--config", p(&cfg), "--in", p(&shards), "--out", p(&model_dir), "--deterministic"]);
    let report = json(&model_dir.join("train_report.json"));
    assert!(report["result"]["final_accuracy"].as_f64().unwrap() >= 0.99, "{report}");
    assert!(model_dir.join("model.tgck").exists());
    assert!(std::fs::read_to_string(model_dir.join("loss.csv")).unwrap().starts_with("step,loss\n"));

    let gen = t.path().join("gen");
    ok(&["generate", "--config", p(&cfg), "--checkpoint", p(&model_dir.join("model.tgck")), "--out", p(&gen)]);
    let manifest = std::fs::read_to_string(gen.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let file = v["file"].as_str().expect("flow written");
        let cap = traffic_lm::pcap::read_pcap(std::fs::File::open(gen.join(file)).unwrap()).unwrap();
        assert!(!cap.records.is_empty());
    }
}

#[test]
fn self_comparison_reports_zero_divergence() {
    let t = tempfile::tempdir().unwrap();
    let a = write_flows(&t.path().join("a"), "flow", &fixture_corpus(12, 30, 4));
    let out = t.path().join("eval");
    ok(&["eval-jsd-packet", "--real", p(&a), "--gen", p(&a), "--out", p(&out), "--deterministic"]);
    let r = json(&out.join("jsd_packet.json"));
    for f in ["sport", "dport", "src_address", "dst_address", "packet_length", "ttl", "average"] {
        assert_eq!(r["result"][f].as_f64().unwrap(), 0.0, "{f}");
    }
    ok(&["eval-jsd-flow", "--real", p(&a), "--gen", p(&a), "--out", p(&out), "--deterministic"]);
    let r = json(&out.join("jsd_flow.json"));
    assert_eq!(r["result"]["average"].as_f64().unwrap(), 0.0);
    ok(&["eval-cdf", "--real", p(&a), "--gen", p(&a), "--out", p(&out), "--field", "ttl", "--field", "feature_4"]);
    for f in ["ttl", "feature_4"] {
        let csv = std::fs::read_to_string(out.join(format!("cdf_{f}.csv"))).unwrap();
        assert!(csv.starts_with("source,value,cumulative_fraction\n"));
        assert!(csv.lines().last().unwrap().ends_with(",1"));
    }
}

#[test]
fn deterministic_reports_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let a = write_flows(&t.path().join("a"), "flow", &fixture_corpus(6, 10, 5));
    let b = write_flows(&t.path().join("b"), "flow", &fixture_corpus(6, 10, 6));
    let shards = t.path().join("shards");
    ok(&["tokenize", "--in", p(&a), "--out", p(&shards)]);
    let cfg = write_config(t.path(), serde_json::json!({ "model": { "max_len": 64 }, "train": { "steps": 4 } }));
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let out = t.path().join(format!("run{run_id}"));
        ok(&["eval-jsd-packet", "--real", p(&a), "--gen", p(&b), "--out", p(&out), "--deterministic", "--seed", "3"]);
        ok(&["pretrain", "--config", p(&cfg), "--in", p(&shards), "--out", p(&out), "--deterministic", "--seed", "3"]);
        outputs.push(["jsd_packet.json", "train_report.json", "loss.csv", "model.tgck"].map(|f| std::fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn finetune_classify_and_discriminate_run_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let corpus = class_corpus(2, 6, 0, 2);
    let mut lines = String::new();
    for class in 0..2 {
        let flows: Vec<Flow> = corpus.iter().filter(|(_, c)| *c == class).map(|(f, _)| f.clone()).collect();
        let dir = write_flows(&t.path().join(format!("pcap{class}")), "flow", &flows);
        let shards = t.path().join(format!("shards{class}"));
        ok(&["tokenize", "--in", p(&dir), "--out", p(&shards)]);
        for i in 0..flows.len() {
            lines.push_str(&format!(
                "{{\"shard\":\"shards{class}/flow_{i:03}.tgtk\",\"class_index\":{class},\"class_name\":\"c{class}\"}}\n"
            ));
        }
    }
    let labels = t.path().join("labels.jsonl");
    std::fs::write(&labels, lines).unwrap();
    let cfg = write_config(
        t.path(),
        serde_json::json!({
            "model": { "max_len": 64 },
            "train": { "steps": 2 },
            "classify": { "max_len": 64, "train": { "steps": 20 }, "seeds": 2 }
        }),
    );
    let pre = t.path().join("pre");
    ok(&["pretrain", "--config", p(&cfg), "--in", p(&t.path().join("shards0")), "--out", p(&pre)]);
    let ft = t.path().join("ft");
    ok(&["finetune", "--config", p(&cfg), "--labels", p(&labels), "--checkpoint", p(&pre.join("model.tgck")), "--out", p(&ft)]);
    assert!(ft.join("label_space.json").exists());
    let cls = t.path().join("cls");
    ok(&["classify", "--config", p(&cfg), "--labels", p(&labels), "--checkpoint", p(&ft.join("model.tgck")), "--out", p(&cls)]);
    let r = json(&cls.join("classification.json"));
    assert!(r["result"]["predictions"].as_array().unwrap().iter().all(|x| x.as_u64().unwrap() < 2));
    let disc = t.path().join("disc");
    let out = ok(&[
        "discriminate",
        "--config",
        p(&cfg),
        "--real",
        p(&t.path().join("pcap0")),
        "--gen",
        p(&t.path().join("pcap1")),
        "--checkpoint",
        p(&pre.join("model.tgck")),
        "--out",
        p(&disc),
    ]);
    assert!(out.contains("(±"));
    assert_eq!(json(&disc.join("discriminate.json"))["result"]["scores"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes_classify_failures() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let bad = write_config(t.path(), serde_json::json!({ "train": { "learning_rat": 1.0 } }));
    let r = run(&["tokenize", "--config", p(&bad), "--in", p(t.path()), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("load_config"));

    let r = run(&["tokenize", "--in", p(&t.path().join("missing")), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("list_inputs"));

    let fixtures = write_flows(&t.path().join("fx"), "flow", &overfit_corpus(1)[..2]);
    let shards = t.path().join("shards");
    ok(&["tokenize", "--in", p(&fixtures), "--out", p(&shards)]);
    let hot = write_config(t.path(), serde_json::json!({ "model": { "max_len": 64 }, "train": { "learning_rate": 1e300, "steps": 20 } }));
    let r = run(&["pretrain", "--config", p(&hot), "--in", p(&shards), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("model.tgck").exists());
    assert!(out.join("loss.csv").exists());

    let r = run(&["tokenize", "--in", p(&fixtures), "--out", p(&out), "--mechanism", "bogus"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn tokenized_shards_match_library_tokenizer() {
    let t = tempfile::tempdir().unwrap();
    let flows = overfit_corpus(3);
    let fixtures = write_flows(&t.path().join("fx"), "flow", &flows);
    let shards = t.path().join("shards");
    ok(&["tokenize", "--in", p(&fixtures), "--out", p(&shards)]);
    for (i, f) in flows.iter().enumerate() {
        let ids = traffic_lm::shard::read_shard(std::fs::File::open(shards.join(format!("flow_{i:03}.tgtk"))).unwrap()).unwrap();
        assert_eq!(ids, tokenize_flow(f).unwrap().0);
    }
}
