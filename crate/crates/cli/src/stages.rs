//! Pipeline stages. Each stage reads and writes only its declared files and
//! drops a manifest with the config hash and input content hashes, so a run
//! can be audited and re-runs can be compared byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};

use satscribe_core::captioner::{
    generate_caption, itc_retrieval_accuracy, load_captioner, save_captioner, train_captioner,
};
use satscribe_core::corpus::{self, SatTile};
use satscribe_core::encode::{CachedEncoder, Encoder, ReferenceEncoder, RemoteEncoder};
use satscribe_core::explain::{build_report, render_markdown, render_svg, sampled_shap, Attribution};
use satscribe_core::fusion::{
    self, aggregate_county, predict, ridge_fit, ridge_predict, TrainConfig,
};
use satscribe_core::grammar::parse_attributes;
use satscribe_core::mlp::forward_eval;
use satscribe_core::prompting::{build_prompt, request_captions, CaptionRecord};
use satscribe_core::seeds;
use satscribe_core::Error as CoreError;

use crate::config::{EncoderKind, ExplainTarget, Mode, PipelineConfig, ScSource};
use crate::log;
use crate::manifest::write_manifest;

/// Caption stream selector for the `caption` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionStream {
    Llm,
    Toy,
}

pub struct StagePaths {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl StagePaths {
    fn new(config: &PipelineConfig) -> StagePaths {
        StagePaths {
            corpus_dir: config.paths.corpus_dir.clone(),
            out_dir: config.paths.out_dir.clone(),
        }
    }

    fn tiles(&self) -> PathBuf {
        self.corpus_dir.join("tiles.jsonl")
    }
    fn svi(&self) -> PathBuf {
        self.corpus_dir.join("svi.csv")
    }
    fn corpus_captions(&self) -> PathBuf {
        self.corpus_dir.join("captions.jsonl")
    }
    fn captions(&self, stream: CaptionStream) -> PathBuf {
        match stream {
            CaptionStream::Llm => self.out_dir.join("captions_llm.jsonl"),
            CaptionStream::Toy => self.out_dir.join("captions_sc.jsonl"),
        }
    }
    fn parsed(&self, stream: CaptionStream) -> PathBuf {
        match stream {
            CaptionStream::Llm => self.out_dir.join("captions_llm_parsed.jsonl"),
            CaptionStream::Toy => self.out_dir.join("captions_sc_parsed.jsonl"),
        }
    }
    fn embeddings(&self, stream: CaptionStream) -> PathBuf {
        match stream {
            CaptionStream::Llm => self.out_dir.join("emb_llm.jsonl"),
            CaptionStream::Toy => self.out_dir.join("emb_sc.jsonl"),
        }
    }
    fn captioner(&self) -> PathBuf {
        self.out_dir.join("captioner.json")
    }
    fn captioner_metrics(&self) -> PathBuf {
        self.out_dir.join("captioner_metrics.csv")
    }
    fn model(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }
    fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }
    fn predictions(&self) -> PathBuf {
        self.out_dir.join("predictions.jsonl")
    }
    fn county_predictions(&self) -> PathBuf {
        self.out_dir.join("county_predictions.csv")
    }
    fn shap_report(&self) -> PathBuf {
        self.out_dir.join("shap_report.json")
    }
    fn report_md(&self) -> PathBuf {
        self.out_dir.join("report.md")
    }
    fn top_dims_svg(&self) -> PathBuf {
        self.out_dir.join("top_dims.svg")
    }
}

fn require(path: &Path, produced_by: &str, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("missing {what}; run `{produced_by}`");
    }
    Ok(())
}

fn ensure_out_dir(paths: &StagePaths) -> anyhow::Result<()> {
    std::fs::create_dir_all(&paths.out_dir)
        .with_context(|| format!("creating {}", paths.out_dir.display()))
}

/// Which modality streams the current configuration uses for the regressor.
fn sc_stream(config: &PipelineConfig) -> CaptionStream {
    match config.sc_source {
        ScSource::ToyCaptioner => CaptionStream::Toy,
        ScSource::Tier2 => CaptionStream::Llm,
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn run_synth(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    let world_config = corpus::SyntheticWorldConfig {
        seed: config.seed,
        n_counties: config.synth.n_counties,
        tiles_per_county: config.synth.tiles_per_county,
        caption_noise_rate: config.synth.caption_noise_rate,
        svi_link_weights: config.synth.svi_link_weights.clone(),
    };
    let world = corpus::synth_world(&world_config)?;
    corpus::save_world(&paths.corpus_dir, &world_config, &world)?;
    log::info(
        "synth",
        &format!(
            "{} tiles across {} counties (noise {})",
            world.tiles.len(),
            config.synth.n_counties,
            config.synth.caption_noise_rate
        ),
    );
    write_manifest(config, "synth", &[])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// caption
// ---------------------------------------------------------------------------

pub fn run_caption(config: &PipelineConfig, stream: CaptionStream) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    match stream {
        CaptionStream::Llm => match config.mode {
            Mode::Synthetic => {
                require(&paths.corpus_captions(), "synth", "corpus captions")?;
                let records: Vec<CaptionRecord> = corpus::read_jsonl(&paths.corpus_captions())?;
                corpus::write_jsonl(&paths.captions(stream), &records)?;
                log::info(
                    "caption",
                    &format!("replayed {} grammar captions as the llm stream", records.len()),
                );
                write_manifest(config, "caption-llm", &[paths.corpus_captions()])?;
            }
            Mode::Real => {
                require(&paths.tiles(), "synth", "tile manifest")?;
                let provider = config
                    .caption_provider
                    .clone()
                    .ok_or_else(|| anyhow!("mode=real requires caption_provider in the config"))?;
                let mut provider = provider;
                if provider.fixture_dir.is_none() {
                    provider.fixture_dir = config.paths.fixture_dir.clone();
                }
                let tiles = corpus::load_tiles(&paths.tiles())?;
                let prompt = build_prompt(2)?;
                let outcomes = request_captions(&tiles, &prompt, &provider)?;
                let mut records = Vec::new();
                let mut failures = 0usize;
                for outcome in outcomes {
                    match outcome {
                        Ok(rec) => records.push(rec),
                        Err(failure) => {
                            failures += 1;
                            log::warn(
                                "caption",
                                &format!("tile {}: {}", failure.tile_id, failure.message),
                            );
                        }
                    }
                }
                if records.is_empty() {
                    bail!("captioning failed for every tile ({failures} failures)");
                }
                corpus::write_jsonl(&paths.captions(stream), &records)?;
                log::info(
                    "caption",
                    &format!("{} captions fetched, {failures} failures", records.len()),
                );
                write_manifest(config, "caption-llm", &[paths.tiles()])?;
            }
        },
        CaptionStream::Toy => {
            require(&paths.tiles(), "synth", "tile manifest")?;
            require(&paths.captioner(), "train-captioner", "captioner checkpoint")?;
            let model = load_captioner(&paths.captioner())?;
            let tiles = corpus::load_tiles(&paths.tiles())?;
            let records: Vec<CaptionRecord> = tiles
                .iter()
                .map(|t| generate_caption(&model, t, 60, &config.captioner.features))
                .collect::<Result<_, CoreError>>()?;
            corpus::write_jsonl(&paths.captions(stream), &records)?;
            log::info(
                "caption",
                &format!("{} captions generated by the toy captioner", records.len()),
            );
            write_manifest(
                config,
                "caption-toy",
                &[paths.tiles(), paths.captioner()],
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-captioner
// ---------------------------------------------------------------------------

pub fn run_train_captioner(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.tiles(), "synth", "tile manifest")?;
    require(&paths.captions(CaptionStream::Llm), "caption", "captions")?;
    let tiles = corpus::load_tiles(&paths.tiles())?;
    let captions: Vec<CaptionRecord> = corpus::read_jsonl(&paths.captions(CaptionStream::Llm))?;
    let by_id: BTreeMap<&str, &CaptionRecord> =
        captions.iter().map(|c| (c.tile_id.as_str(), c)).collect();
    let total = tiles.len();
    let pairs: Vec<(SatTile, CaptionRecord)> = tiles
        .into_iter()
        .filter_map(|t| by_id.get(t.tile_id.as_str()).map(|c| (t, (*c).clone())))
        .collect();
    if pairs.len() < total {
        log::warn(
            "train-captioner",
            &format!("{} tiles have no caption and were skipped", total - pairs.len()),
        );
    }
    let (model, metrics) = train_captioner(&pairs, &config.captioner)?;
    save_captioner(&paths.captioner(), &model)?;
    let mut csv = String::from("epoch,loss,itc,ce\n");
    for m in &metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.loss, m.itc, m.ce));
    }
    std::fs::write(paths.captioner_metrics(), csv)?;
    let acc = itc_retrieval_accuracy(
        &model,
        &pairs,
        config.captioner.batch,
        config.captioner.seed,
        &config.captioner.features,
    )?;
    log::info(
        "train-captioner",
        &format!(
            "{} pairs, {} epochs, final loss {:.4}, in-batch retrieval {:.3}",
            pairs.len(),
            metrics.len(),
            metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
            acc
        ),
    );
    write_manifest(
        config,
        "train-captioner",
        &[paths.tiles(), paths.captions(CaptionStream::Llm)],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

pub fn run_parse(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.captions(CaptionStream::Llm), "caption", "captions")?;
    let mut inputs = Vec::new();
    for stream in [CaptionStream::Llm, CaptionStream::Toy] {
        let src = paths.captions(stream);
        if !src.is_file() {
            continue;
        }
        let mut records: Vec<CaptionRecord> = corpus::read_jsonl(&src)?;
        for r in &mut records {
            r.attributes = parse_attributes(&r.text);
        }
        corpus::write_jsonl(&paths.parsed(stream), &records)?;
        log::info(
            "parse",
            &format!("{} captions parsed from {}", records.len(), src.display()),
        );
        inputs.push(src);
    }
    write_manifest(config, "parse", &inputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct EmbeddingRecord {
    tile_id: String,
    embedding: satscribe_core::encode::Embedding,
}

fn encoder_for(config: &PipelineConfig) -> anyhow::Result<Box<dyn Encoder>> {
    match config.encoder {
        EncoderKind::Reference => Ok(Box::new(ReferenceEncoder)),
        EncoderKind::Remote => {
            let mut provider = config
                .embed_provider
                .clone()
                .ok_or_else(|| anyhow!("encoder=remote requires embed_provider in the config"))?;
            if provider.fixture_dir.is_none() {
                provider.fixture_dir = config.paths.fixture_dir.clone();
            }
            Ok(Box::new(RemoteEncoder { cfg: provider }))
        }
    }
}

pub fn run_encode(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(
        &paths.parsed(CaptionStream::Llm),
        "parse",
        "parsed captions",
    )?;
    let cache_dir = config
        .paths
        .cache_dir
        .clone()
        .unwrap_or_else(|| paths.out_dir.join("cache"));
    let encoder = CachedEncoder::new(DynEncoder(encoder_for(config)?), &cache_dir)?;
    let mut inputs = Vec::new();
    for stream in [CaptionStream::Llm, CaptionStream::Toy] {
        let src = paths.parsed(stream);
        if !src.is_file() {
            continue;
        }
        let records: Vec<CaptionRecord> = corpus::read_jsonl(&src)?;
        let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
        let embeddings = encoder.encode(&texts)?;
        let out: Vec<EmbeddingRecord> = records
            .iter()
            .zip(embeddings)
            .map(|(r, e)| EmbeddingRecord {
                tile_id: r.tile_id.clone(),
                embedding: e,
            })
            .collect();
        corpus::write_jsonl(&paths.embeddings(stream), &out)?;
        log::info(
            "encode",
            &format!("{} embeddings written for {}", out.len(), src.display()),
        );
        inputs.push(src);
    }
    write_manifest(config, "encode", &inputs)?;
    Ok(())
}

/// Object-safe wrapper so the cache can hold either encoder.
struct DynEncoder(Box<dyn Encoder>);

impl Encoder for DynEncoder {
    fn id(&self) -> String {
        self.0.id()
    }
    fn encode(
        &self,
        texts: &[String],
    ) -> satscribe_core::Result<Vec<satscribe_core::encode::Embedding>> {
        self.0.encode(texts)
    }
}

// ---------------------------------------------------------------------------
// train / predict
// ---------------------------------------------------------------------------

/// One regression row: tile id plus the sample consumed by the fusion model.
/// Tile ids travel with the rows because (in real mode) some tiles may have
/// failed captioning and dropped out of the embedding files.
struct DatasetRow {
    tile_id: String,
    sample: fusion::Sample,
}

fn load_dataset(config: &PipelineConfig, paths: &StagePaths) -> anyhow::Result<Vec<DatasetRow>> {
    let sc = sc_stream(config);
    require(&paths.embeddings(sc), "encode", "embeddings")?;
    require(&paths.embeddings(CaptionStream::Llm), "encode", "embeddings")?;
    require(&paths.tiles(), "synth", "tile manifest")?;
    let tiles = corpus::load_tiles(&paths.tiles())?;
    let county: BTreeMap<String, String> = tiles
        .iter()
        .map(|t| (t.tile_id.clone(), t.county_fips.clone()))
        .collect();
    let sc_embs: Vec<EmbeddingRecord> = corpus::read_jsonl(&paths.embeddings(sc))?;
    let llm_embs: Vec<EmbeddingRecord> = corpus::read_jsonl(&paths.embeddings(CaptionStream::Llm))?;
    let llm_by_id: BTreeMap<String, satscribe_core::encode::Embedding> = llm_embs
        .into_iter()
        .map(|r| (r.tile_id, r.embedding))
        .collect();
    let mut dataset = Vec::new();
    for rec in sc_embs {
        let llm = llm_by_id
            .get(&rec.tile_id)
            .ok_or_else(|| anyhow!("tile {} missing from emb_llm.jsonl", rec.tile_id))?;
        let fips = county
            .get(&rec.tile_id)
            .ok_or_else(|| anyhow!("tile {} missing from tiles.jsonl", rec.tile_id))?;
        dataset.push(DatasetRow {
            tile_id: rec.tile_id,
            sample: (rec.embedding, llm.clone(), fips.clone()),
        });
    }
    Ok(dataset)
}

pub fn run_train(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.svi(), "synth", "county SVI table")?;
    let dataset: Vec<fusion::Sample> = load_dataset(config, &paths)?
        .into_iter()
        .map(|row| row.sample)
        .collect();
    let svi = corpus::load_svi(&paths.svi())?;
    let train_cfg = TrainConfig {
        epochs: config.regressor.epochs,
        lr: config.regressor.lr,
        batch: config.regressor.batch,
        seed: config.regressor.seed,
        hidden: config.regressor.hidden,
        d_o: config.regressor.d_o,
        level: config.level,
    };
    let model = fusion::train(&dataset, &svi, &train_cfg)?;
    fusion::save_model(&paths.model(), &model)?;

    let mut csv = String::from("epoch,loss,split\n");
    for m in &model.metrics {
        csv.push_str(&format!("{},{},{}\n", m.epoch, m.loss, m.split));
    }
    // Ridge baseline on the satellite-caption embeddings, for comparison.
    let xs: Vec<Vec<f64>> = dataset.iter().map(|(sc, _, _)| sc.vector.clone()).collect();
    let ys: Vec<f64> = dataset
        .iter()
        .map(|(_, _, fips)| svi[fips].svi_overall)
        .collect();
    let ridge = ridge_fit(&xs, &ys, config.regressor.ridge_lambda)?;
    let ridge_mse = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let p = ridge_predict(&ridge, x);
            (p - y) * (p - y)
        })
        .sum::<f64>()
        / xs.len() as f64;
    csv.push_str(&format!(
        "{},{},ridge_baseline_train\n",
        config.regressor.epochs.saturating_sub(1),
        ridge_mse
    ));
    std::fs::write(paths.metrics(), csv)?;
    log::info(
        "train",
        &format!(
            "{} samples, final loss {:.6}, ridge baseline mse {:.6}",
            dataset.len(),
            model.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
            ridge_mse
        ),
    );
    write_manifest(
        config,
        "train",
        &[
            paths.embeddings(sc_stream(config)),
            paths.embeddings(CaptionStream::Llm),
            paths.svi(),
        ],
    )?;
    Ok(())
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PredictionRecord {
    tile_id: String,
    county_fips: String,
    prediction: f64,
    prediction_clamped: f64,
}

pub fn run_predict(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.model(), "train", "model")?;
    let dataset = load_dataset(config, &paths)?;
    let model = fusion::load_model(&paths.model())?;
    let mut records = Vec::new();
    let mut county_inputs = Vec::new();
    for row in &dataset {
        let (e_sc, e_llm, fips) = &row.sample;
        let y = predict(&model, e_sc, e_llm)?;
        county_inputs.push((fips.clone(), y));
        records.push(PredictionRecord {
            tile_id: row.tile_id.clone(),
            county_fips: fips.clone(),
            prediction: y,
            prediction_clamped: y.clamp(0.0, 1.0),
        });
    }
    corpus::write_jsonl(&paths.predictions(), &records)?;
    let county = aggregate_county(&county_inputs);
    let mut csv = String::from("FIPS,PREDICTION,PREDICTION_CLAMPED\n");
    for (fips, y) in &county {
        csv.push_str(&format!("{fips},{y},{}\n", y.clamp(0.0, 1.0)));
    }
    std::fs::write(paths.county_predictions(), csv)?;
    log::info(
        "predict",
        &format!("{} tile predictions, {} counties", records.len(), county.len()),
    );
    write_manifest(
        config,
        "predict",
        &[paths.model(), paths.embeddings(sc_stream(config))],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// explain / report
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ShapArtifact {
    k: usize,
    m: usize,
    target: ExplainTarget,
    report: satscribe_core::explain::ShapReport,
    attributions: Vec<Attribution>,
}

pub fn run_explain(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.model(), "train", "model")?;
    let dataset = load_dataset(config, &paths)?;
    let sc = sc_stream(config);
    require(&paths.parsed(sc), "parse", "parsed captions")?;
    let captions: Vec<CaptionRecord> = corpus::read_jsonl(&paths.parsed(sc))?;
    let caption_text: BTreeMap<String, String> = captions
        .into_iter()
        .map(|c| (c.tile_id, c.text))
        .collect();
    let model = fusion::load_model(&paths.model())?;
    let ex = &config.explain;

    // Instance selection and background sampling, both seeded.
    let n = dataset.len();
    let order = seeds::shuffled_indices(n, ex.seed, "explain-instances");
    let instance_idx: Vec<usize> = order.into_iter().take(ex.instances.min(n)).collect();
    let bg_order = seeds::shuffled_indices(n, ex.seed, "explain-background");
    let background_idx: Vec<usize> = bg_order.into_iter().take(ex.background.min(n)).collect();

    let background: Vec<Vec<f64>> = match ex.target {
        ExplainTarget::Caption => background_idx
            .iter()
            .map(|&i| dataset[i].sample.0.vector.clone())
            .collect(),
        ExplainTarget::Fused => background_idx
            .iter()
            .map(|&i| {
                let (e_sc, e_llm, _) = &dataset[i].sample;
                let w = fusion::attention_weights(e_sc, e_llm, &model.fusion)?;
                fusion::fuse_raw(&e_sc.vector, &e_llm.vector, w)
            })
            .collect::<Result<_, CoreError>>()?,
    };

    let mut attributions = Vec::new();
    for (rank, &i) in instance_idx.iter().enumerate() {
        let (e_sc, e_llm, _) = &dataset[i].sample;
        let tile_id = dataset[i].tile_id.clone();
        let phi_seed = seeds::derive(ex.seed, "shap-instance", rank as u64);
        let mut attribution = match ex.target {
            ExplainTarget::Caption => {
                let e_llm = e_llm.clone();
                let fusion_params = model.fusion.clone();
                let mlp = model.mlp.clone();
                let f = move |x: &[f64]| -> f64 {
                    let w = fusion::attention_weights_raw(x, &e_llm.vector, &fusion_params)
                        .expect("finite inputs");
                    let fused =
                        fusion::fuse_raw(x, &e_llm.vector, w).expect("validated weights");
                    forward_eval(&mlp, &fused).expect("matching dims")
                };
                sampled_shap(&f, &background, &e_sc.vector, ex.n_samples, phi_seed)?
            }
            ExplainTarget::Fused => {
                let w = fusion::attention_weights(e_sc, e_llm, &model.fusion)?;
                let fused = fusion::fuse_raw(&e_sc.vector, &e_llm.vector, w)?;
                let mlp = model.mlp.clone();
                let f = move |x: &[f64]| -> f64 { forward_eval(&mlp, x).expect("matching dims") };
                sampled_shap(&f, &background, &fused, ex.n_samples, phi_seed)?
            }
        };
        attribution.instance_id = tile_id;
        attributions.push(attribution);
    }

    let (report, warnings) = build_report(&attributions, &caption_text, ex.k, ex.m)?;
    for w in warnings {
        log::warn("explain", &w);
    }
    let artifact = ShapArtifact {
        k: ex.k,
        m: ex.m,
        target: ex.target,
        report,
        attributions,
    };
    let json = serde_json::to_string_pretty(&artifact)?;
    std::fs::write(paths.shap_report(), json + "\n")?;
    log::info(
        "explain",
        &format!(
            "{} attributions over {} samples each",
            artifact.attributions.len(),
            ex.n_samples
        ),
    );
    write_manifest(
        config,
        "explain",
        &[
            paths.model(),
            paths.embeddings(sc_stream(config)),
            paths.parsed(sc_stream(config)),
        ],
    )?;
    Ok(())
}

pub fn run_report(config: &PipelineConfig) -> anyhow::Result<()> {
    let paths = StagePaths::new(config);
    ensure_out_dir(&paths)?;
    require(&paths.shap_report(), "explain", "attribution report")?;
    require(&paths.metrics(), "train", "training metrics")?;
    let raw = std::fs::read_to_string(paths.shap_report())?;
    let artifact: ShapArtifact = serde_json::from_str(&raw)?;
    let metrics = std::fs::read_to_string(paths.metrics())?;

    let mut md = String::new();
    md.push_str("# Pipeline report\n\n## Training metrics (tail)\n\n```\n");
    let lines: Vec<&str> = metrics.lines().collect();
    md.push_str(lines[0]);
    md.push('\n');
    for line in lines.iter().skip(1.max(lines.len().saturating_sub(6))) {
        md.push_str(line);
        md.push('\n');
    }
    md.push_str("```\n\n");
    if paths.county_predictions().is_file() {
        md.push_str("## County predictions\n\n```\n");
        md.push_str(&std::fs::read_to_string(paths.county_predictions())?);
        md.push_str("```\n\n");
    }
    md.push_str(&render_markdown(&artifact.report));
    std::fs::write(paths.report_md(), md)?;
    std::fs::write(paths.top_dims_svg(), render_svg(&artifact.report))?;
    log::info("report", "report.md and top_dims.svg written");
    write_manifest(
        config,
        "report",
        &[paths.shap_report(), paths.metrics()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// run-all
// ---------------------------------------------------------------------------

pub fn run_all(config: &PipelineConfig) -> anyhow::Result<()> {
    run_synth(config)?;
    run_caption(config, CaptionStream::Llm)?;
    if config.sc_source == ScSource::ToyCaptioner {
        run_train_captioner(config)?;
        run_caption(config, CaptionStream::Toy)?;
    }
    run_parse(config)?;
    run_encode(config)?;
    run_train(config)?;
    run_predict(config)?;
    run_explain(config)?;
    run_report(config)?;
    Ok(())
}
