//! File-based pipeline stages behind the CLI.
//!
//! Output directory layout:
//!
//! ```text
//! layout/<doc>.json        cleaned layouts            (ingest)
//! merged/<doc>.json        merged text blocks         (merge)
//! bags/<doc>.json          bag manifests              (bag)
//! dedup/<doc>.groups.json  identity groups            (dedup)
//! dedup/<doc>.json         manifests after dedup      (dedup)
//! split.json                                          (split)
//! model.ckpt, train_log.jsonl                         (train)
//! report.json, report.csv                             (eval)
//! ```
//!
//! Each stage reads only its predecessors' files, so any stage can be
//! re-run on its own; identical inputs and seeds give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bagger::{build_manifest, BagManifest};
use crate::dedup::{find_identities, merge_bags, DedupConfig, DedupError, IdentityGroups, Raster};
use crate::embedstore::{read_store, EmbeddingStore, StoreError};
use crate::item_key;
use crate::layout::{clean_text_blocks, parse_layout, write_layout, LayoutDocument, LayoutError};
use crate::milopt::{self, AdapterModel, AdapterSpec, LossConfig, OptError, TrainConfig};
use crate::retrieval::{aggregate, eval_document, RetrievalReport};
use crate::splits::{make_folds, make_setting, Setting, SplitError, SplitSpec};
use crate::synth::{self, SynthConfig, SynthError};
use crate::textmerge::{merge_blocks, MergeConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{what} not found at {path} (run `{stage}` first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        stage: &'static str,
    },
    #[error("{path}: {source}")]
    Layout { path: PathBuf, source: LayoutError },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error("{path}: {source}")]
    Store { path: PathBuf, source: StoreError },
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Stable class name for machine-readable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "Config",
            PipelineError::MissingArtifact { .. } => "MissingArtifact",
            PipelineError::Layout { .. } => "Layout",
            PipelineError::Manifest { .. } => "Manifest",
            PipelineError::Dedup(_) => "Dedup",
            PipelineError::Store { .. } => "Store",
            PipelineError::Split(_) => "Split",
            PipelineError::Opt(_) => "Optimization",
            PipelineError::Synth(_) => "Synth",
            PipelineError::Io { .. } => "Io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub setting: Setting,
    /// Target manufacturer; the first one in sorted order when empty.
    pub target: String,
    pub repeat: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            setting: Setting::ManyShot,
            target: String::new(),
            repeat: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `<corpus_dir>/embeddings/image.emb`.
    pub image_embeddings: Option<PathBuf>,
    /// Defaults to `<corpus_dir>/embeddings/text.emb`.
    pub text_embeddings: Option<PathBuf>,
    /// Text store for `train` only, e.g. concatenated bag pseudo-texts;
    /// defaults to `text_embeddings`.
    pub train_text_embeddings: Option<PathBuf>,
    /// Image features for the dedup prefilter, keyed like the embeddings.
    pub dedup_features: Option<PathBuf>,
    pub seed: u64,
    pub merge: MergeConfig,
    pub dedup: DedupConfig,
    pub loss: LossConfig,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("out"),
            image_embeddings: None,
            text_embeddings: None,
            train_text_embeddings: None,
            dedup_features: None,
            seed: 0,
            merge: MergeConfig::default(),
            dedup: DedupConfig::default(),
            loss: LossConfig::default(),
            adapter: AdapterSpec::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.corpus_dir);
        rebase(&mut cfg.output_dir);
        for p in [
            &mut cfg.image_embeddings,
            &mut cfg.text_embeddings,
            &mut cfg.train_text_embeddings,
            &mut cfg.dedup_features,
        ]
        .into_iter()
        .flatten()
        {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.dedup.validate().map_err(|e| config(&e))?;
        self.loss.validate().map_err(|e| config(&e))?;
        self.train.validate().map_err(|e| config(&e))?;
        self.synth.validate().map_err(|e| config(&e))?;
        Ok(())
    }

    /// Propagate one seed to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn image_embeddings(&self) -> PathBuf {
        self.image_embeddings
            .clone()
            .unwrap_or_else(|| self.corpus_dir.join("embeddings").join(synth::IMAGE_FILE))
    }

    pub fn text_embeddings(&self) -> PathBuf {
        self.text_embeddings
            .clone()
            .unwrap_or_else(|| self.corpus_dir.join("embeddings").join(synth::TEXT_FILE))
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }
}

/// What a stage did, for the CLI to print.
#[derive(Debug, Default)]
pub struct StageOutcome {
    pub written: Vec<PathBuf>,
    pub message: String,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub dry_run: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn require(path: &Path, what: &'static str, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            stage,
        })
    }
}

/// Sorted `*.json` files of `dir` whose stem has no further extension.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let stem_plain = path
            .file_stem()
            .and_then(|s| s.to_str())
            .is_some_and(|s| !s.contains('.'));
        if path.is_file() && path.extension().is_some_and(|e| e == "json") && stem_plain {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn check_doc_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(format!(
            "document id {id:?} is not usable as a file name"
        )))
    }
}

fn load_layouts(dir: &Path) -> Result<Vec<LayoutDocument>> {
    json_files(dir)?
        .into_iter()
        .map(|p| {
            parse_layout(&read(&p)?).map_err(|source| PipelineError::Layout { path: p, source })
        })
        .collect()
}

fn load_manifests(dir: &Path) -> Result<Vec<BagManifest>> {
    json_files(dir)?
        .into_iter()
        .map(|p| {
            BagManifest::from_json(&read(&p)?)
                .map_err(|source| PipelineError::Manifest { path: p, source })
        })
        .collect()
}

fn load_store(path: &Path) -> Result<EmbeddingStore> {
    read_store(&read(path)?).map_err(|source| PipelineError::Store {
        path: path.to_path_buf(),
        source,
    })
}

fn load_split(path: &Path) -> Result<SplitSpec> {
    serde_json::from_slice(&read(path)?).map_err(|source| PipelineError::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, dry_run: bool) -> Self {
        Pipeline { cfg, dry_run }
    }

    fn emit(&self, outcome: &mut StageOutcome, path: PathBuf, bytes: &[u8]) -> Result<()> {
        if !self.dry_run {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        outcome.written.push(path);
        Ok(())
    }

    fn per_doc_stage<F>(
        &self,
        input: &str,
        from_stage: &'static str,
        output: &str,
        mut f: F,
    ) -> Result<StageOutcome>
    where
        F: FnMut(&LayoutDocument) -> Result<Vec<u8>>,
    {
        let dir = self.cfg.out(input);
        require(&dir, "layout manifests", from_stage)?;
        let mut outcome = StageOutcome::default();
        for doc in load_layouts(&dir)? {
            let bytes = f(&doc)?;
            self.emit(
                &mut outcome,
                self.cfg.out(output).join(format!("{}.json", doc.doc_id)),
                &bytes,
            )?;
        }
        outcome.message = format!("{} documents", outcome.written.len());
        Ok(outcome)
    }

    pub fn ingest(&self) -> Result<StageOutcome> {
        let dir = &self.cfg.corpus_dir;
        require(dir, "corpus directory", "synth")?;
        let mut seen = BTreeSet::new();
        let mut outcome = StageOutcome::default();
        for path in json_files(dir)? {
            let doc = parse_layout(&read(&path)?).map_err(|source| PipelineError::Layout {
                path: path.clone(),
                source,
            })?;
            check_doc_id(&doc.doc_id)?;
            if !seen.insert(doc.doc_id.clone()) {
                return Err(PipelineError::Config(format!(
                    "duplicate document id {}",
                    doc.doc_id
                )));
            }
            let clean = clean_text_blocks(&doc);
            self.emit(
                &mut outcome,
                self.cfg.out("layout").join(format!("{}.json", doc.doc_id)),
                &write_layout(&clean),
            )?;
        }
        outcome.message = format!("{} layout manifests", outcome.written.len());
        Ok(outcome)
    }

    pub fn merge(&self) -> Result<StageOutcome> {
        let cfg = self.cfg.merge;
        self.per_doc_stage("layout", "ingest", "merged", |doc| {
            let mut merged = doc.clone();
            merged.pages = doc.pages.iter().map(|p| merge_blocks(p, &cfg)).collect();
            Ok(write_layout(&merged))
        })
    }

    pub fn bag(&self) -> Result<StageOutcome> {
        self.per_doc_stage("merged", "merge", "bags", |doc| {
            Ok(build_manifest(doc).to_json())
        })
    }

    pub fn dedup(&self) -> Result<StageOutcome> {
        let bags_dir = self.cfg.out("bags");
        require(&bags_dir, "bag manifests", "bag")?;
        let merged_dir = self.cfg.out("merged");
        require(&merged_dir, "merged layouts", "merge")?;
        let features = match (
            &self.cfg.dedup_features,
            self.cfg.dedup.use_feature_prefilter,
        ) {
            (Some(p), true) => Some(load_store(p)?),
            _ => None,
        };
        let mut outcome = StageOutcome::default();
        let mut merged_groups = 0usize;
        for manifest in load_manifests(&bags_dir)? {
            let layout_path = merged_dir.join(format!("{}.json", manifest.doc_id));
            require(&layout_path, "merged layout", "merge")?;
            let doc =
                parse_layout(&read(&layout_path)?).map_err(|source| PipelineError::Layout {
                    path: layout_path.clone(),
                    source,
                })?;
            let mut rasters = Vec::new();
            for (_, img) in doc.images() {
                let path = self.cfg.corpus_dir.join(&img.pixels_ref);
                rasters.push((img.id.clone(), Raster::load(&path)?));
            }
            rasters.sort_by(|a, b| a.0.cmp(&b.0));
            let local = match &features {
                Some(store) => {
                    let mut local = EmbeddingStore::new(store.modality(), store.dim());
                    for (id, _) in &rasters {
                        if let Some(row) = store.get(&item_key(&doc.doc_id, id)) {
                            local
                                .push(id.clone(), row)
                                .map_err(|source| PipelineError::Store {
                                    path: self.cfg.dedup_features.clone().unwrap_or_default(),
                                    source,
                                })?;
                        }
                    }
                    Some(local)
                }
                None => None,
            };
            let groups: IdentityGroups =
                find_identities(&doc.doc_id, &rasters, local.as_ref(), &self.cfg.dedup)?;
            merged_groups += groups.groups.iter().filter(|g| g.len() > 1).count();
            let merged = merge_bags(&manifest, &groups)?;
            let dir = self.cfg.out("dedup");
            self.emit(
                &mut outcome,
                dir.join(format!("{}.groups.json", doc.doc_id)),
                &groups.to_json(),
            )?;
            self.emit(
                &mut outcome,
                dir.join(format!("{}.json", doc.doc_id)),
                &merged.to_json(),
            )?;
        }
        outcome.message = format!(
            "{} documents, {merged_groups} identity groups",
            outcome.written.len() / 2
        );
        Ok(outcome)
    }

    pub fn split(&self) -> Result<StageOutcome> {
        let dir = self.cfg.out("layout");
        require(&dir, "layout manifests", "ingest")?;
        let docs = load_layouts(&dir)?;
        let folds = make_folds(&docs, self.cfg.seed)?;
        let target =
            if self.cfg.split.target.is_empty() && self.cfg.split.setting != Setting::AllData {
                folds
                    .by_manufacturer
                    .keys()
                    .next()
                    .cloned()
                    .ok_or_else(|| PipelineError::Config("corpus is empty".into()))?
            } else {
                self.cfg.split.target.clone()
            };
        let spec = make_setting(
            &folds,
            self.cfg.split.setting,
            &target,
            self.cfg.split.repeat,
        )?;
        let mut outcome = StageOutcome {
            message: format!(
                "{} train / {} test documents",
                spec.train.len(),
                spec.test.len()
            ),
            ..Default::default()
        };
        self.emit(&mut outcome, self.cfg.out("split.json"), &spec.to_json())?;
        Ok(outcome)
    }

    fn training_inputs(
        &self,
        stage: &'static str,
    ) -> Result<(Vec<BagManifest>, SplitSpec, EmbeddingStore, EmbeddingStore)> {
        let dedup_dir = self.cfg.out("dedup");
        require(&self.cfg.out("bags"), "bag manifests", "bag")?;
        require(&dedup_dir, "deduplicated manifests", "dedup")?;
        let split_path = self.cfg.out("split.json");
        require(&split_path, "split manifest", "split")?;
        let (img, txt) = (self.cfg.image_embeddings(), self.cfg.text_embeddings());
        require(&img, "image embeddings", stage)?;
        require(&txt, "text embeddings", stage)?;
        Ok((
            load_manifests(&dedup_dir)?,
            load_split(&split_path)?,
            load_store(&img)?,
            load_store(&txt)?,
        ))
    }

    pub fn train(&self) -> Result<StageOutcome> {
        let (manifests, split, images, mut texts) = self.training_inputs("synth")?;
        if let Some(path) = &self.cfg.train_text_embeddings {
            require(path, "training text embeddings", "export")?;
            texts = load_store(path)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let init = AdapterModel::from_spec(&self.cfg.adapter, images.dim(), &mut rng);
        let (model, log) = milopt::train(
            &images,
            &texts,
            &manifests,
            &split,
            &self.cfg.loss,
            &init,
            &self.cfg.train,
        )?;
        let mut lines = Vec::new();
        for entry in &log {
            serde_json::to_writer(&mut lines, entry).expect("log entry serializes");
            lines.push(b'\n');
        }
        let mut outcome = StageOutcome {
            message: match log.last() {
                Some(e) => format!(
                    "{} epochs, final loss {:.4}, sigma {:.4}",
                    log.len(),
                    e.mean_loss,
                    e.sigma
                ),
                None => "no epochs".into(),
            },
            ..Default::default()
        };
        self.emit(
            &mut outcome,
            self.cfg.out("model.ckpt"),
            &model.to_checkpoint(),
        )?;
        self.emit(&mut outcome, self.cfg.out("train_log.jsonl"), &lines)?;
        Ok(outcome)
    }

    /// Evaluate the trained adapter (or the raw embeddings with
    /// `untrained`) on the split's test documents, or on every document
    /// when the split holds nothing out.
    pub fn eval(&self, untrained: bool) -> Result<StageOutcome> {
        let (manifests, split, images, texts) = self.training_inputs("synth")?;
        let model = if untrained {
            None
        } else {
            let path = self.cfg.out("model.ckpt");
            require(&path, "adapter checkpoint", "train")?;
            Some(AdapterModel::from_checkpoint(&read(&path)?)?)
        };
        let layouts = load_layouts(&self.cfg.out("layout"))?;
        let tags: BTreeMap<String, String> = layouts
            .into_iter()
            .map(|d| (d.doc_id, d.manufacturer))
            .collect();
        let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
        let mut docs = Vec::new();
        for m in &manifests {
            if test.is_empty() || test.contains(m.doc_id.as_str()) {
                docs.push(eval_document(&images, &texts, m, model.as_ref())?);
            }
        }
        if docs.is_empty() {
            return Err(PipelineError::Config(
                "no test documents to evaluate".into(),
            ));
        }
        let report = aggregate(&docs, &tags);
        let mut outcome = StageOutcome {
            message: format!(
                "{} documents, i2t r@1 {:.4}, t2i r@1 {:.4}",
                docs.len(),
                report.overall.i2t.r1,
                report.overall.t2i.r1
            ),
            ..Default::default()
        };
        self.emit(&mut outcome, self.cfg.out("report.json"), &report.to_json())?;
        self.emit(
            &mut outcome,
            self.cfg.out("report.csv"),
            report.to_csv().as_bytes(),
        )?;
        Ok(outcome)
    }

    pub fn report(&self) -> Result<StageOutcome> {
        let path = self.cfg.out("report.json");
        require(&path, "retrieval report", "eval")?;
        let report: RetrievalReport =
            serde_json::from_slice(&read(&path)?).map_err(|source| PipelineError::Manifest {
                path: path.clone(),
                source,
            })?;
        Ok(StageOutcome {
            written: Vec::new(),
            message: report.render_table(),
        })
    }

    pub fn synth(&self) -> Result<StageOutcome> {
        let corpus = synth::generate(&self.cfg.synth)?;
        let dir = &self.cfg.corpus_dir;
        if !self.dry_run {
            synth::write_corpus(&corpus, dir).map_err(io_err(dir))?;
        }
        Ok(StageOutcome {
            written: vec![dir.clone()],
            message: format!(
                "{} documents, {} images, {} texts",
                corpus.documents.len(),
                corpus.images.len(),
                corpus.texts.len()
            ),
        })
    }
}
