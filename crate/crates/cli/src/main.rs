//! `lvsoftmax`: vocabularies, partitions, dictionaries, training, decoding,
//! evaluation, benchmarks and the K′ sweep from the command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
//! Log lines go to stderr, prefixed with their level; `RUST_LOG` adjusts the
//! level (default `info`).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use lvsoftmax::align::{build_dictionary, train_ibm1, Dictionary};
use lvsoftmax::bench::{time_decoding, time_train_updates, DecodeBench, TimingReport, TrainBench};
use lvsoftmax::corpus::{coverage, read_sentences, ParallelCorpus, Vocabulary};
use lvsoftmax::decode::{sweep_k_prime, translate, CandidateOptions, TranslateOptions, DEFAULT_BEAM};
use lvsoftmax::eval::bleu;
use lvsoftmax::io::write_atomic;
use lvsoftmax::model::{init_params, read_checkpoint, train_from, write_checkpoint, TrainConfig};
use lvsoftmax::partition::{partition_corpus, reshuffle_and_repartition};

#[derive(Parser)]
#[command(name = "lvsoftmax", version, propagate_version = true)]
#[command(about = "Attention translation with a partition-truncated softmax over a large target vocabulary")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file (`token<TAB>count`, id order) from a corpus.
    Vocab(VocabArgs),
    /// Report how the training corpus splits into partitions.
    Partition(PartitionArgs),
    /// Train IBM Model 1 and write a translation dictionary.
    Dict(DictArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Translate one sentence per line with beam search.
    Decode(DecodeArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Eval(EvalArgs),
    /// Time training updates and decoding, as CSV.
    Bench(BenchArgs),
    /// BLEU for several dictionary list sizes K′, as CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Source sentences, one tokenized sentence per line.
    #[arg(long)]
    src: PathBuf,
    /// Target sentences, line-aligned with the source.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
}

impl CorpusArgs {
    fn load(&self) -> Result<ParallelCorpus> {
        let src = read_sentences(&self.src).with_context(|| format!("reading {}", self.src.display()))?;
        let tgt = read_sentences(&self.tgt).with_context(|| format!("reading {}", self.tgt.display()))?;
        let corpus = ParallelCorpus::encode(&src, &tgt, load_vocab(&self.src_vocab)?, load_vocab(&self.tgt_vocab)?)?;
        info!("{} sentence pairs", corpus.len());
        Ok(corpus)
    }
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Maximum entries, the two special tokens included.
    #[arg(long, default_value_t = usize::MAX)]
    max_size: usize,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Unique target words per partition.
    #[arg(long)]
    tau: usize,
    /// Shuffle the pairs with this seed first; without it the corpus order
    /// is kept.
    #[arg(long)]
    seed: Option<u64>,
    /// Report file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DictArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    output: PathBuf,
    /// EM iterations.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Translations kept per source word.
    #[arg(long, default_value_t = 20)]
    max_entries: usize,
    #[arg(long, default_value_t = 0.0)]
    min_prob: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// JSON training configuration; the flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    output: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    reshuffle: Option<bool>,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("candidates").args(["k", "k_prime"]).multiple(true)))]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Translations, one per line; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    /// Longest output in tokens, EOS included [default: twice the source
    /// length plus five]
    #[arg(long)]
    max_len: Option<usize>,
    /// Most frequent target words in the candidate list.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Dictionary translations per source word in the candidate list.
    #[arg(long = "K-prime", requires = "dict")]
    k_prime: Option<usize>,
    /// Dictionary written by `dict`.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Replace emitted UNKs through attention and the dictionary.
    #[arg(long)]
    replace_unk: bool,
    /// One candidate list per batch instead of per sentence.
    #[arg(long, requires = "candidates")]
    shared_candidates: bool,
    /// Leave UNK out of candidate lists.
    #[arg(long, requires = "candidates")]
    exclude_unk: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchKind {
    Train,
    Decode,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchKind::All)]
    kind: BenchKind,
    /// CSV file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = lvsoftmax::bench::MIN_REPETITIONS)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target vocabulary sizes for the training benchmark.
    #[arg(long, value_delimiter = ',', default_values_t = [10_000, 50_000, 200_000])]
    vocab_sizes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    tau: usize,
    /// Baseline vocabulary for the decoding benchmark.
    #[arg(long, default_value_t = 30_000)]
    small_vocab: usize,
    #[arg(long, default_value_t = 200_000)]
    large_vocab: usize,
    #[arg(long = "K", default_value_t = 1000)]
    k: usize,
    #[arg(long = "K-prime", default_value_t = 10)]
    k_prime: usize,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    dict: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Reference translations, line-aligned with the input.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "K", default_value_t = 30_000)]
    k: usize,
    #[arg(long = "K-prime", value_delimiter = ',', default_values_t = [0, 1, 5, 10, 20])]
    k_prime: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long)]
    shared_candidates: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// CSV file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    read_sentences(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(output: Option<&Path>, contents: &str) -> Result<()> {
    match output {
        Some(path) => {
            write_atomic(path, contents.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
            info!("wrote {}", path.display());
        }
        None => std::io::stdout().write_all(contents.as_bytes())?,
    }
    Ok(())
}

fn lines_of(sentences: &[Vec<String>]) -> String {
    sentences.iter().map(|s| s.join(" ") + "\n").collect()
}

fn vocab(args: &VocabArgs) -> Result<()> {
    let sentences = read_lines(&args.input)?;
    let vocab = Vocabulary::build(&sentences, args.max_size)?;
    info!("{} entries, {:.2}% of tokens covered", vocab.len(), coverage(vocab.len(), &sentences, &vocab)?);
    let mut out = Vec::new();
    vocab.write_tsv(&mut out)?;
    write_atomic(&args.output, &out)?;
    info!("wrote {}", args.output.display());
    Ok(())
}

fn partition(args: &PartitionArgs) -> Result<()> {
    let corpus = args.corpus.load()?;
    let parts = match args.seed {
        Some(seed) => reshuffle_and_repartition(&corpus, args.tau, seed)?,
        None => partition_corpus(&corpus, args.tau, (0..corpus.len()).collect())?,
    };
    info!("{} partitions", parts.partitions.len());
    emit(args.output.as_deref(), &parts.report())
}

fn dict(args: &DictArgs) -> Result<()> {
    let corpus = args.corpus.load()?;
    let table = train_ibm1(&corpus, args.iterations)?;
    for (i, ll) in table.log_likelihood.iter().enumerate() {
        info!("iteration {i}: log-likelihood {ll:.4}");
    }
    let dictionary = build_dictionary(&table, args.max_entries, args.min_prob)?;
    let mut out = Vec::new();
    dictionary.write(corpus.src_vocab(), corpus.tgt_vocab(), &mut out)?;
    write_atomic(&args.output, &out)?;
    info!("{} source words; wrote {}", dictionary.len(), args.output.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => serde_json::json!({}),
    };
    let Some(map) = value.as_object_mut() else { bail!("the training configuration must be a JSON object") };
    let overrides = [
        ("tau", args.tau.map(Into::into)),
        ("epochs", args.epochs.map(Into::into)),
        ("batch_size", args.batch_size.map(Into::into)),
        ("learning_rate", args.learning_rate.map(Into::into)),
        ("clip_norm", args.clip_norm.map(Into::into)),
        ("seed", args.seed.map(Into::into)),
        ("reshuffle", args.reshuffle.map(Into::into)),
    ];
    for (key, v) in overrides {
        if let Some(v) = v {
            map.insert(key.to_owned(), v);
        }
    }
    let config: TrainConfig = serde_json::from_value(value).context("training configuration")?;
    config.validate()?;
    Ok(config)
}

fn train(args: &TrainArgs) -> Result<()> {
    let config = train_config(args)?;
    info!("configuration {}", serde_json::to_string(&config)?);
    let corpus = args.corpus.load()?;
    let dims = config.dims.with_vocab(corpus.src_vocab().len(), corpus.tgt_vocab().len());
    let params = match &args.init {
        Some(path) => {
            let params = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            if params.dims != dims {
                bail!("checkpoint dimensions {:?} do not match the configuration {:?}", params.dims, dims);
            }
            params
        }
        None => init_params(dims, config.seed)?,
    };
    if config.tau >= dims.v_tgt {
        warn!("tau {} covers the whole target vocabulary; training with the full softmax", config.tau);
    }
    let trained = train_from(params, &corpus, &config, |log| {
        info!(
            "epoch {}: mean token loss {:.4}, {} partitions, {} updates",
            log.epoch,
            log.mean_token_loss(),
            log.partitions,
            log.updates
        );
    })?;
    write_checkpoint(&trained.params, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    info!("wrote {}", args.output.display());
    Ok(())
}

fn load_dictionary(path: Option<&Path>, src: &Vocabulary, tgt: &Vocabulary) -> Result<Dictionary> {
    match path {
        Some(p) => Dictionary::load(src, tgt, p).with_context(|| format!("reading dictionary {}", p.display())),
        None => Ok(Dictionary::default()),
    }
}

fn decode(args: &DecodeArgs) -> Result<()> {
    let params =
        read_checkpoint(&args.model.model).with_context(|| format!("reading {}", args.model.model.display()))?;
    let (src_vocab, tgt_vocab) = (load_vocab(&args.model.src_vocab)?, load_vocab(&args.model.tgt_vocab)?);
    let dictionary = load_dictionary(args.dict.as_deref(), &src_vocab, &tgt_vocab)?;
    if args.replace_unk && args.dict.is_none() {
        warn!("no dictionary given; every replaced UNK copies its source word");
    }
    let candidates = (args.k.is_some() || args.k_prime.is_some()).then(|| CandidateOptions {
        k: args.k.unwrap_or(0),
        k_prime: args.k_prime.unwrap_or(0),
        include_unk: !args.exclude_unk,
        shared: args.shared_candidates,
    });
    let options = TranslateOptions {
        beam_width: args.beam,
        max_len: args.max_len,
        candidates,
        replace_unk: args.replace_unk,
        batch_size: args.batch_size,
    };
    let sources = read_lines(&args.input)?;
    let translations = translate(&params, &sources, &src_vocab, &tgt_vocab, &dictionary, &options)?;
    info!("translated {} sentences", translations.len());
    emit(args.output.as_deref(), &lines_of(&translations))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let score = bleu(&read_lines(&args.hyp)?, &read_lines(&args.reference)?)?;
    println!("{score}");
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let mut rows = Vec::new();
    if args.kind != BenchKind::Decode {
        let spec = TrainBench {
            vocab_sizes: args.vocab_sizes.clone(),
            tau: args.tau,
            repetitions: args.repetitions,
            seed: args.seed,
            ..TrainBench::default()
        };
        info!("timing training updates for vocabularies {:?}", spec.vocab_sizes);
        rows.extend(time_train_updates(&spec)?.rows);
    }
    if args.kind != BenchKind::Train {
        let spec = DecodeBench {
            small_vocab: args.small_vocab,
            large_vocab: args.large_vocab,
            k: args.k,
            k_prime: args.k_prime,
            beam_width: args.beam,
            repetitions: args.repetitions,
            seed: args.seed,
            ..DecodeBench::default()
        };
        info!("timing decoding at vocabularies {} and {}", spec.small_vocab, spec.large_vocab);
        rows.extend(time_decoding(&spec)?.rows);
    }
    emit(args.output.as_deref(), &TimingReport::new(rows).to_csv())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let params =
        read_checkpoint(&args.model.model).with_context(|| format!("reading {}", args.model.model.display()))?;
    let (src_vocab, tgt_vocab) = (load_vocab(&args.model.src_vocab)?, load_vocab(&args.model.tgt_vocab)?);
    let dictionary = load_dictionary(Some(&args.dict), &src_vocab, &tgt_vocab)?;
    let sources = read_lines(&args.input)?;
    let references = read_lines(&args.reference)?;
    let options = TranslateOptions {
        beam_width: args.beam,
        max_len: None,
        candidates: Some(CandidateOptions { k: args.k, k_prime: 0, include_unk: true, shared: args.shared_candidates }),
        replace_unk: true,
        batch_size: args.batch_size,
    };
    let rows =
        sweep_k_prime(&params, &sources, &references, &src_vocab, &tgt_vocab, &dictionary, &args.k_prime, &options)?;
    let mut csv = String::from("k_prime,bleu\n");
    for (k_prime, score) in rows {
        info!("K'={k_prime}: {score}");
        csv += &format!("{k_prime},{:.2}\n", score.score);
    }
    emit(args.output.as_deref(), &csv)
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Vocab(a) => vocab(a),
        Command::Partition(a) => partition(a),
        Command::Dict(a) => dict(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "{} {}", record.level(), record.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
