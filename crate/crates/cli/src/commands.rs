//! One function per subcommand; each fronts a library operation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use traffic_lm::classify::{self, LabelSpace, LabeledFlow};
use traffic_lm::codec::{detokenize_flow, tokenize_flow, TokenId};
use traffic_lm::flow::{anonymize, split_flows, Flow, SplitReport};
use traffic_lm::generate::generate_batch;
use traffic_lm::lm::train::{accuracy, windows_to_examples};
use traffic_lm::lm::{load_checkpoint, make_windows, train, BackpropMode};
use traffic_lm::metrics::{self, HeaderField};
use traffic_lm::pcap::{read_pcap, write_pcap, Timestamp};
use traffic_lm::shard::{corpus_shards, open_shard, write_shard_file, CorpusManifest, ShardEntry, MANIFEST_FILE};
use traffic_lm::Model64;

use crate::config::RunConfig;
use crate::error::{at, CliError};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub deterministic: bool,
    pub command: &'static str,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix: Option<u64>,
    result: T,
}

impl Ctx {
    fn write_json<T: Serialize>(&self, name: &str, result: &T) -> Result<PathBuf, CliError> {
        let generated_at_unix = (!self.deterministic)
            .then(|| std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
        let report = Report { command: self.command, seed: self.cfg.seed, generated_at_unix, result };
        let path = self.out.join(name);
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&path)?);
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.write_all(b"\n")?;
            w.flush()
        };
        write().map_err(at("write_report"))?;
        Ok(path)
    }
}

/// Capture files under `path`: the file itself, or every `*.pcap` in a
/// directory in name order.
pub fn pcap_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::data("list_inputs", format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "pcap")).collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data("list_inputs", format!("no .pcap files in {}", path.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "capture".into())
}

fn read_capture(p: &Path) -> Result<traffic_lm::pcap::Capture, CliError> {
    let f = File::open(p).map_err(at("read_pcap"))?;
    read_pcap(BufReader::new(f)).map_err(at("read_pcap"))
}

/// Flows of one capture; unsplit captures become one flow without a key.
fn capture_flows(p: &Path, split: bool) -> Result<(Vec<Flow>, SplitReport), CliError> {
    let cap = read_capture(p)?;
    if split {
        let r = split_flows(cap.records);
        let report = r.report(p.display().to_string());
        Ok((r.flows, report))
    } else {
        let n = cap.records.len();
        let report = SplitReport { source: p.display().to_string(), records: n, flows: 1, dropped: 0, drop_reasons: BTreeMap::new() };
        Ok((vec![Flow { key: None, initiator: None, packets: cap.records }], report))
    }
}

fn write_flow_pcap(path: &Path, flow: &Flow) -> Result<(), CliError> {
    let lt = flow.packets.first().map(|p| p.linktype).unwrap_or(traffic_lm::pcap::linktype::ETHERNET);
    let f = File::create(path).map_err(at("write_pcap"))?;
    write_pcap(BufWriter::new(f), lt, &flow.packets).map_err(at("write_pcap"))
}

fn flow_file_name(source_stem: &str, index: usize, flows: usize) -> String {
    if flows == 1 {
        format!("{source_stem}.pcap")
    } else {
        format!("{source_stem}_{index:05}.pcap")
    }
}

pub fn split_flows_cmd(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let files = pcap_files(input)?;
    let reports = files
        .par_iter()
        .map(|p| {
            let (flows, report) = capture_flows(p, true)?;
            for (i, f) in flows.iter().enumerate() {
                write_flow_pcap(&ctx.out.join(flow_file_name(&stem(p), i, flows.len())), f)?;
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let flows: usize = reports.iter().map(|r| r.flows).sum();
    let dropped: usize = reports.iter().map(|r| r.dropped).sum();
    ctx.write_json("split_report.json", &reports)?;
    println!("split {} capture(s) into {flows} flow(s); {dropped} packet(s) dropped", files.len());
    Ok(())
}

pub fn tokenize_cmd(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let files = pcap_files(input)?;
    let codec = &ctx.cfg.codec;
    let entries = files
        .par_iter()
        .map(|p| {
            let (flows, _) = capture_flows(p, codec.split)?;
            let mut tokens: Vec<TokenId> = Vec::new();
            let mut base_times_us = Vec::with_capacity(flows.len());
            let mut linktype = traffic_lm::pcap::linktype::ETHERNET;
            for f in flows {
                let f = anonymize(f, codec.anonymize).map_err(at("anonymize"))?;
                if let Some(first) = f.packets.first() {
                    base_times_us.push(first.timestamp.micros());
                    linktype = first.linktype;
                }
                tokens.extend(tokenize_flow(&f).map_err(at("tokenize_flow"))?.0);
            }
            let name = format!("{}.tgtk", stem(p));
            write_shard_file(&ctx.out.join(&name), &tokens).map_err(at("write_shard"))?;
            Ok(ShardEntry {
                path: name,
                source: p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                linktype,
                flows: base_times_us.len(),
                tokens: tokens.len() as u64,
                base_times_us,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = CorpusManifest { shards: entries, ..CorpusManifest::default() };
    manifest.save(&ctx.out).map_err(at("write_manifest"))?;
    let flows: usize = manifest.shards.iter().map(|s| s.flows).sum();
    let tokens: u64 = manifest.shards.iter().map(|s| s.tokens).sum();
    println!("tokenized {flows} flow(s) into {} shard(s), {tokens} tokens", manifest.shards.len());
    Ok(())
}

/// Every flow of a token corpus, in manifest order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Vec<TokenId>>, CliError> {
    let mut flows = Vec::new();
    for p in corpus_shards(dir).map_err(at("list_shards"))? {
        for f in open_shard(&p).map_err(at("read_shard"))? {
            flows.push(f.map_err(at("read_shard"))?);
        }
    }
    if flows.is_empty() {
        return Err(CliError::data("load_corpus", format!("no flows in {}", dir.display())));
    }
    Ok(flows)
}

pub fn detokenize_cmd(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let manifest = if input.join(MANIFEST_FILE).exists() {
        CorpusManifest::load(input).map_err(at("read_manifest"))?
    } else {
        let shards = corpus_shards(input).map_err(at("list_shards"))?;
        let shards = shards
            .iter()
            .map(|p| ShardEntry {
                path: p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                source: format!("{}.pcap", stem(p)),
                linktype: 0,
                flows: 0,
                tokens: 0,
                base_times_us: Vec::new(),
            })
            .collect();
        CorpusManifest { shards, ..CorpusManifest::default() }
    };
    let written = manifest
        .shards
        .par_iter()
        .map(|entry| {
            let flows =
                open_shard(&input.join(&entry.path)).map_err(at("read_shard"))?.collect::<Result<Vec<_>, _>>().map_err(at("read_shard"))?;
            let source_stem = stem(Path::new(&entry.source));
            for (i, tokens) in flows.iter().enumerate() {
                let base = Timestamp::from_micros(entry.base_times_us.get(i).copied().unwrap_or(0));
                let lt = (entry.linktype != 0).then_some(entry.linktype);
                let flow = detokenize_flow(tokens, base, lt).map_err(at("detokenize_flow"))?;
                write_flow_pcap(&ctx.out.join(flow_file_name(&source_stem, i, flows.len())), &flow)?;
            }
            Ok(flows.len())
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    println!("wrote {} pcap file(s)", written.iter().sum::<usize>());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    windows: usize,
    parameters: usize,
    steps_run: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    final_accuracy: f64,
    reached_target: bool,
    checkpoints: Vec<String>,
}

fn names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().filter_map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned())).collect()
}

pub fn pretrain_cmd(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let flows = load_corpus(input)?;
    let mcfg = &ctx.cfg.model;
    let tcfg = &ctx.cfg.train;
    let stride = tcfg.stride.unwrap_or(mcfg.max_len);
    let windows = make_windows(&flows, mcfg.max_len, stride, tcfg.pack_flows);
    let examples = windows_to_examples(&windows);
    let mut model = Model64::new(mcfg.clone(), ctx.cfg.seed).map_err(at("model_init"))?;
    let report = train(&mut model, &examples, tcfg, BackpropMode::Reversible, Some(&ctx.out)).map_err(at("train"))?;
    let acc = match report.accuracy.last() {
        Some(&(s, a)) if s == report.steps_run => a,
        _ => accuracy(&model, &examples).map_err(at("accuracy"))?,
    };
    let summary = TrainSummary {
        windows: examples.len(),
        parameters: model.params.num_params(),
        steps_run: report.steps_run,
        first_loss: report.losses.first().map(|l| l.1),
        final_loss: report.losses.last().map(|l| l.1),
        final_accuracy: acc,
        reached_target: report.reached_target,
        checkpoints: names(&report.checkpoints),
    };
    ctx.write_json("train_report.json", &summary)?;
    println!(
        "trained {} step(s) on {} window(s): loss {:.4} -> {:.4}, next-token accuracy {:.4}",
        summary.steps_run,
        summary.windows,
        summary.first_loss.unwrap_or(f64::NAN),
        summary.final_loss.unwrap_or(f64::NAN),
        acc
    );
    Ok(())
}

/// One line of a labelled corpus manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    /// Shard path, relative to the manifest's directory.
    pub shard: String,
    pub class_index: usize,
    #[serde(default)]
    pub class_name: Option<String>,
}

pub fn load_labeled(manifest: &Path) -> Result<(Vec<LabeledFlow>, BTreeMap<usize, String>), CliError> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::data("read_labels", format!("{}: {e}", manifest.display())))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut flows = Vec::new();
    let mut class_names = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: LabelLine = serde_json::from_str(line).map_err(|e| CliError::data("read_labels", format!("line {}: {e}", n + 1)))?;
        if let Some(name) = &l.class_name {
            class_names.insert(l.class_index, name.clone());
        }
        for f in open_shard(&dir.join(&l.shard)).map_err(at("read_shard"))? {
            flows.push(LabeledFlow { tokens: f.map_err(at("read_shard"))?, class_index: l.class_index });
        }
    }
    if flows.is_empty() {
        return Err(CliError::data("read_labels", "no labelled flows"));
    }
    Ok((flows, class_names))
}

pub const LABEL_SPACE_FILE: &str = "label_space.json";

pub fn finetune_cmd(ctx: &Ctx, labels: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let (mut model, _) = load_checkpoint::<f64>(checkpoint).map_err(at("load_checkpoint"))?;
    let (flows, class_names) = load_labeled(labels)?;
    let c = &ctx.cfg.classify;
    let num_classes = flows.iter().map(|f| f.class_index).max().unwrap_or(0) + 1;
    let space = LabelSpace::new(c.width, num_classes, c.max_len.min(model.config.max_len)).map_err(at("label_space"))?;
    let report = classify::finetune(&mut model, &flows, &space, &c.train, Some(&ctx.out)).map_err(at("finetune"))?;
    let write = || -> std::io::Result<()> {
        let f = BufWriter::new(File::create(ctx.out.join(LABEL_SPACE_FILE))?);
        serde_json::to_writer_pretty(f, &serde_json::json!({ "space": space, "class_names": class_names }))?;
        Ok(())
    };
    write().map_err(at("write_label_space"))?;
    println!(
        "fine-tuned {} step(s) on {} flow(s) over {num_classes} class(es); final label loss {:.4}",
        report.steps_run,
        flows.len(),
        report.losses.last().map(|l| l.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Deserialize)]
struct SavedSpace {
    space: LabelSpace,
    #[serde(default)]
    class_names: BTreeMap<usize, String>,
}

pub fn classify_cmd(ctx: &Ctx, labels: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint::<f64>(checkpoint).map_err(at("load_checkpoint"))?;
    let space_path = checkpoint.with_file_name(LABEL_SPACE_FILE);
    let text =
        std::fs::read_to_string(&space_path).map_err(|e| CliError::data("read_label_space", format!("{}: {e}", space_path.display())))?;
    let saved: SavedSpace = serde_json::from_str(&text).map_err(|e| CliError::data("read_label_space", e.to_string()))?;
    let (flows, _) = load_labeled(labels)?;
    let tokens: Vec<Vec<TokenId>> = flows.iter().map(|f| f.tokens.clone()).collect();
    let truth: Vec<usize> = flows.iter().map(|f| f.class_index).collect();
    let preds = classify::predict_all(&model, &tokens, &saved.space).map_err(at("predict"))?;
    let report = classify::macro_f1(&preds, &truth).map_err(at("macro_f1"))?;
    ctx.write_json(
        "classification.json",
        &serde_json::json!({ "metrics": report, "class_names": saved.class_names, "predictions": preds }),
    )?;
    println!("accuracy {:.4}, macro F1 {:.4} over {} flow(s)", report.accuracy, report.macro_f1, preds.len());
    Ok(())
}

pub fn generate_cmd(ctx: &Ctx, checkpoint: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint::<f64>(checkpoint).map_err(at("load_checkpoint"))?;
    let g = &ctx.cfg.generate;
    let lines = generate_batch(&model, g.count, &g.prompt, &g.sampling, Timestamp::from_micros(g.base_time_us), &ctx.out)
        .map_err(at("generate_flow"))?;
    let ok = lines.iter().filter(|l| l.file.is_some()).count();
    let restarts: usize = lines.iter().map(|l| l.restarts).sum();
    println!("generated {ok}/{} flow(s), {restarts} packet restart(s)", lines.len());
    Ok(())
}

fn load_flows(path: &Path) -> Result<Vec<Flow>, CliError> {
    let mut out = Vec::new();
    for p in pcap_files(path)? {
        out.extend(capture_flows(&p, true)?.0);
    }
    Ok(out)
}

pub fn eval_jsd_packet_cmd(ctx: &Ctx, real: &Path, generated: &Path) -> Result<(), CliError> {
    let report = metrics::packet_header_jsd(&load_flows(real)?, &load_flows(generated)?).map_err(at("packet_header_jsd"))?;
    ctx.write_json("jsd_packet.json", &report)?;
    println!(
        "packet JSD  sport {:.4}  dport {:.4}  src {:.4}  dst {:.4}  len {:.4}  ttl {:.4}  avg {:.4}",
        report.sport, report.dport, report.src_address, report.dst_address, report.packet_length, report.ttl, report.average
    );
    Ok(())
}

pub fn eval_jsd_flow_cmd(ctx: &Ctx, real: &Path, generated: &Path) -> Result<(), CliError> {
    let cmp = metrics::flow_feature_distributions(&load_flows(real)?, &load_flows(generated)?).map_err(at("flow_feature_distributions"))?;
    let r = &cmp.report;
    ctx.write_json("jsd_flow.json", r)?;
    println!(
        "flow JSD  f1 {:.4}  f2 {:.4}  f3 {:.4}  f4 {:.4}  f5 {:.4}  f6 {:.4}  avg {:.4}",
        r.feature_1, r.feature_2, r.feature_3, r.feature_4, r.feature_5, r.feature_6, r.average
    );
    Ok(())
}

pub const FEATURE_FIELDS: [&str; 6] = ["feature_1", "feature_2", "feature_3", "feature_4", "feature_5", "feature_6"];

fn field_samples(flows: &[Flow], field: &str) -> Result<Vec<f64>, CliError> {
    if let Some(i) = FEATURE_FIELDS.iter().position(|f| *f == field) {
        return flows
            .iter()
            .map(|f| metrics::flow_feature_vector(f).map(|v| v.get(i)))
            .collect::<Result<_, _>>()
            .map_err(at("flow_feature_vector"));
    }
    let h: HeaderField = field.parse().map_err(|e: String| CliError::config("eval_cdf", e))?;
    Ok(metrics::header_samples(flows, h))
}

pub fn eval_cdf_cmd(ctx: &Ctx, real: &Path, generated: &Path, fields: &[String]) -> Result<(), CliError> {
    let (r, g) = (load_flows(real)?, load_flows(generated)?);
    let mut fields: Vec<String> = if fields.is_empty() { ctx.cfg.eval.cdf_fields.clone() } else { fields.to_vec() };
    if fields.is_empty() {
        fields = HeaderField::ALL.iter().map(|f| f.name().to_string()).chain(FEATURE_FIELDS.iter().map(|s| s.to_string())).collect();
    }
    for field in &fields {
        let (a, b) = (field_samples(&r, field)?, field_samples(&g, field)?);
        metrics::write_cdf_csv(&ctx.out.join(format!("cdf_{field}.csv")), &[("real", &a), ("generated", &b)]).map_err(at("cdf_export"))?;
    }
    println!("wrote {} CDF file(s)", fields.len());
    Ok(())
}

fn tokenized(flows: &[Flow]) -> Result<Vec<Vec<TokenId>>, CliError> {
    flows.iter().map(|f| tokenize_flow(f).map(|t| t.0)).collect::<Result<_, _>>().map_err(at("tokenize_flow"))
}

pub fn discriminate_cmd(ctx: &Ctx, real: &Path, generated: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint::<f64>(checkpoint).map_err(at("load_checkpoint"))?;
    let anon = ctx.cfg.codec.anonymize;
    let prep = |p: &Path| -> Result<Vec<Vec<TokenId>>, CliError> {
        let flows = load_flows(p)?.into_iter().map(|f| anonymize(f, anon)).collect::<Result<Vec<_>, _>>().map_err(at("anonymize"))?;
        tokenized(&flows)
    };
    let report =
        classify::discriminate(&model, &prep(real)?, &prep(generated)?, &ctx.cfg.classify.discriminate()).map_err(at("discriminate"))?;
    ctx.write_json("discriminate.json", &report)?;
    println!("real-vs-generated macro F1 {} over {} seed(s), {} pair(s)", report.formatted, report.scores.len(), report.pairs);
    Ok(())
}
