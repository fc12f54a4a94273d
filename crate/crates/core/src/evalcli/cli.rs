use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::analysis::{analysis_report, decode_all, noise_split_bleu, report_rows, write_rows};
use super::bleu::corpus_bleu;
use super::decode::BeamConfig;
use crate::data::{gen_corpus, load_corpus, save_corpus, CorpusSplit, Quadruple};
use crate::error::{Error, Result};
use crate::model::TokenSeq;
use crate::pipeline::{
    average_checkpoint_files, finalize_st, model_from_checkpoint, run_asr_step, run_mt_step, run_pipeline,
    run_st_from_scratch, run_st_step, Checkpoint, PhaseOutcome, PipelineConfig, RunOptions, StSchedule,
};

#[derive(Parser, Debug)]
#[command(name = "mspst", version, about = "Multi-step speech translation training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// Corpus directory written by gen-data; generated from the config when absent
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Dev,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into OUT/corpus
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Step 1: denoising MT training
    TrainMt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Step 2: ASR training from an MT checkpoint
    TrainAsr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        from: PathBuf,
    },
    /// Step 3: ST fine-tuning from an ASR checkpoint, or from scratch
    TrainSt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, required_unless_present = "scratch")]
        from: Option<PathBuf>,
        /// Train a randomly initialized model for a fixed number of epochs
        #[arg(long, conflicts_with = "from")]
        scratch: bool,
    },
    /// All three steps in order
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        no_sidae: bool,
        #[arg(long)]
        no_cl: bool,
        #[arg(long)]
        no_kd: bool,
    },
    /// Beam-search a split; writes hyp.txt and ref.txt
    Decode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Corpus BLEU of two token files
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Attention entropy, similarity probes and noise-split BLEU as CSV
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        split_threshold: Option<f64>,
    },
    /// Average checkpoint files into OUT/averaged.ckpt
    AverageCkpt {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Runs one command line. Returns 0 on success, 2 on usage or config
/// errors and 1 on anything else.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_for(cfg: &PipelineConfig, arg: &CorpusArg) -> Result<CorpusSplit> {
    let corpus = match &arg.corpus {
        Some(dir) => load_corpus(dir)?,
        None => gen_corpus(&cfg.task_spec(), cfg.data_seed)?,
    };
    if corpus.vocab_size != cfg.vocab_size || corpus.feature_dim != cfg.feature_dim {
        return Err(Error::Config(format!(
            "corpus has vocab {} / features {}, config has {} / {}",
            corpus.vocab_size, corpus.feature_dim, cfg.vocab_size, cfg.feature_dim
        )));
    }
    Ok(corpus)
}

fn prepare_out(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("config.txt"), cfg.to_kv())?;
    Ok(())
}

fn finish_phase(out: &Path, name: &str, outcome: &PhaseOutcome) -> Result<()> {
    outcome.metrics.write(&out.join("metrics.csv"))?;
    outcome.last_checkpoint().save(&out.join(format!("{name}.ckpt")))
}

fn split_of(corpus: &CorpusSplit, split: Split) -> &[Quadruple] {
    match split {
        Split::Dev => &corpus.dev,
        Split::Test => &corpus.test,
    }
}

fn write_tokens(path: &Path, seqs: &[TokenSeq]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(ToString::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus { path: path.to_path_buf(), detail: e.to_string() })?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            prepare_out(&common, &cfg)?;
            let corpus = gen_corpus(&cfg.task_spec(), cfg.data_seed)?;
            save_corpus(&common.out.join("corpus"), &corpus)
        }
        Command::TrainMt { common, corpus } => {
            let cfg = load_config(&common)?;
            let corpus = corpus_for(&cfg, &corpus)?;
            prepare_out(&common, &cfg)?;
            let mut opts = RunOptions { out_dir: Some(common.out.clone()), hook: None };
            let mt = run_mt_step(&cfg, &corpus, &mut opts)?;
            finish_phase(&common.out, "mt", &mt)
        }
        Command::TrainAsr { common, corpus, from } => {
            let cfg = load_config(&common)?;
            let corpus = corpus_for(&cfg, &corpus)?;
            let ckpt = Checkpoint::load(&from)?;
            prepare_out(&common, &cfg)?;
            let mut opts = RunOptions { out_dir: Some(common.out.clone()), hook: None };
            let asr = run_asr_step(&cfg, &corpus, &ckpt, &mut opts)?;
            finish_phase(&common.out, "asr", &asr)
        }
        Command::TrainSt { common, corpus, from, scratch } => {
            let cfg = load_config(&common)?;
            let corpus = corpus_for(&cfg, &corpus)?;
            prepare_out(&common, &cfg)?;
            let mut opts = RunOptions { out_dir: Some(common.out.clone()), hook: None };
            let st = match (scratch, from) {
                (true, _) => run_st_from_scratch(&cfg, &corpus, StSchedule::FixedEpochs(cfg.st_max_epochs), &mut opts)?,
                (false, Some(p)) => run_st_step(&cfg, &corpus, &Checkpoint::load(&p)?, &mut opts)?,
                (false, None) => return Err(Error::Config("train-st needs --from or --scratch".into())),
            };
            finish_phase(&common.out, "st", &st)?;
            let fin = finalize_st(&cfg, &corpus, &st)?;
            fin.checkpoint.save(&common.out.join("final.ckpt"))?;
            println!("dev_st_nll={}", fin.dev_st_nll);
            Ok(())
        }
        Command::Pipeline { common, corpus, no_sidae, no_cl, no_kd } => {
            let mut cfg = load_config(&common)?;
            cfg.use_sidae &= !no_sidae;
            cfg.use_cl &= !no_cl;
            cfg.use_kd &= !no_kd;
            let corpus = corpus_for(&cfg, &corpus)?;
            prepare_out(&common, &cfg)?;
            let mut opts = RunOptions { out_dir: Some(common.out.clone()), hook: None };
            let report = run_pipeline(&cfg, &corpus, &mut opts)?;
            println!("dev_st_nll={}", report.final_model.dev_st_nll);
            Ok(())
        }
        Command::Decode { common, corpus, ckpt, split } => {
            let cfg = load_config(&common)?;
            let corpus = corpus_for(&cfg, &corpus)?;
            let model = model_from_checkpoint(&cfg, &Checkpoint::load(&ckpt)?)?;
            std::fs::create_dir_all(&common.out)?;
            let samples = split_of(&corpus, split);
            let beam = BeamConfig::for_model(&model, cfg.beam, cfg.length_penalty, cfg.max_decode_len);
            let hyps = decode_all(&model, samples, &beam)?;
            let refs: Vec<TokenSeq> = samples.iter().map(|q| q.y.clone()).collect();
            write_tokens(&common.out.join("hyp.txt"), &hyps)?;
            write_tokens(&common.out.join("ref.txt"), &refs)
        }
        Command::Evaluate { common, hyp, reference } => {
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            let bleu = corpus_bleu(&hyps, &refs, 4)?;
            let line = format!("BLEU={bleu}");
            println!("{line}");
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("bleu.txt"), line + "\n")?;
            Ok(())
        }
        Command::Analyze { common, corpus, ckpt, split, split_threshold } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = split_threshold {
                cfg.split_threshold = t;
                cfg.validate()?;
            }
            let corpus = corpus_for(&cfg, &corpus)?;
            let model = model_from_checkpoint(&cfg, &Checkpoint::load(&ckpt)?)?;
            let mapping = cfg.task_spec().target_mapping()?;
            let samples = split_of(&corpus, split);
            let report = analysis_report(&model, &mapping, samples)?;
            let beam = BeamConfig::for_model(&model, cfg.beam, cfg.length_penalty, cfg.max_decode_len);
            let hyps = decode_all(&model, samples, &beam)?;
            let refs: Vec<TokenSeq> = samples.iter().map(|q| q.y.clone()).collect();
            let split = noise_split_bleu(&hyps, &refs, &report.sample_blank_ratios, cfg.split_threshold)?;
            std::fs::create_dir_all(&common.out)?;
            write_rows(&common.out.join("analysis.csv"), &report_rows(&report, &split))
        }
        Command::AverageCkpt { common, inputs } => {
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let avg = average_checkpoint_files(&paths)?;
            std::fs::create_dir_all(&common.out)?;
            avg.save(&common.out.join("averaged.ckpt"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mspst", "bogus"]), 2);
        assert_eq!(run(["mspst", "gen-data", "--nope"]), 2);
        assert_eq!(run(["mspst"]), 2);
        assert_eq!(run(["mspst", "--help"]), 0);
    }

    #[test]
    fn config_errors_exit_2_runtime_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["mspst", "gen-data", "--out", out, "--set", "nonsense=1"]), 2);
        assert_eq!(run(["mspst", "gen-data", "--out", out, "--set", "dropout=1.5"]), 2);
        let missing = dir.path().join("none.ckpt");
        assert_eq!(
            run(["mspst", "decode", "--out", out, "--ckpt", missing.to_str().unwrap()]),
            1
        );
    }

    #[test]
    fn evaluate_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("h.txt");
        std::fs::write(&f, "7 8 9 10\n11 12 13\n").unwrap();
        let out = dir.path().join("o");
        let code = run([
            "mspst", "evaluate", "--hyp", f.to_str().unwrap(), "--ref", f.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert_eq!(std::fs::read_to_string(out.join("bleu.txt")).unwrap(), "BLEU=100\n");
    }
}
