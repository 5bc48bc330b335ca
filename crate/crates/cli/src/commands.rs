use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use focalcodec::bsq::{self, CodeIndex};
use focalcodec::codec::{self, knn_convert, CodecConfig, CodecModel, Variant};
use focalcodec::io::{self, TokenStream};
use focalcodec::numerics::{finite_diff_check, Tape, Tensor};
use focalcodec::trainer::{self, SyntheticFeatureSpec, TrainConfig};
use focalcodec::vocoder::{self, StreamConfig, Vocoder, VocoderConfig};

use crate::{AnalyzeArgs, ConvertArgs, DecodeArgs, EncodeArgs, ResynthArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] focalcodec::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: focalcodec::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} checks failed")]
    Selfcheck { failed: usize, total: usize },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) | CliError::File { source: e, .. } => e.kind(),
            CliError::Mismatch(_) => "mismatch",
            CliError::Usage(_) => "usage",
            CliError::Selfcheck { .. } => "selfcheck",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Tags errors from file-backed calls with the path involved.
fn at<T>(path: &Path, r: focalcodec::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn load_codec(path: &Path) -> Result<CodecModel> {
    at(path, io::load_codec(path))
}

fn load_vocoder(path: &Path, codec: &CodecModel) -> Result<Vocoder> {
    let v = at(path, io::load_vocoder(path))?;
    if v.config.input_dim != codec.config.input_dim {
        return Err(CliError::Mismatch(format!(
            "vocoder expects {}-dim features, codec produces {}",
            v.config.input_dim, codec.config.input_dim
        )));
    }
    Ok(v)
}

fn stream_header(model: &CodecModel, tokens: Vec<CodeIndex>) -> TokenStream {
    TokenStream {
        variant: model.config.variant,
        latent_dim: model.config.latent_dim as u16,
        sample_rate: io::WAV_SAMPLE_RATE,
        tokens,
    }
}

fn check_stream(stream: &TokenStream, model: &CodecModel, path: &Path) -> Result<()> {
    if stream.variant != model.config.variant {
        return Err(CliError::Mismatch(format!(
            "{}: token stream variant {} but model variant {}",
            path.display(),
            stream.variant,
            model.config.variant
        )));
    }
    if stream.latent_dim as usize != model.config.latent_dim {
        return Err(CliError::Mismatch(format!(
            "{}: token stream latent_dim {} but model latent_dim {}",
            path.display(),
            stream.latent_dim,
            model.config.latent_dim
        )));
    }
    if stream.sample_rate != io::WAV_SAMPLE_RATE {
        return Err(CliError::Mismatch(format!(
            "{}: token stream sample rate {} (expected {})",
            path.display(),
            stream.sample_rate,
            io::WAV_SAMPLE_RATE
        )));
    }
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    if a.features.len() != a.out.len() {
        return Err(CliError::Usage(format!(
            "{} --features but {} --out",
            a.features.len(),
            a.out.len()
        )));
    }
    let model = load_codec(&a.model)?;
    if let Some(v) = a.variant {
        if v != model.config.variant {
            return Err(CliError::Mismatch(format!(
                "requested variant {v} but {} holds {}",
                a.model.display(),
                model.config.variant
            )));
        }
    }
    let inputs = a
        .features
        .iter()
        .map(|p| at(p, io::read_features(p)))
        .collect::<Result<Vec<_>>>()?;
    let encoded = model.encode_batch(&inputs, codec::max_threads_from_env())?;
    for ((tokens, out), input) in encoded.into_iter().zip(&a.out).zip(&a.features) {
        let n = tokens.len();
        at(out, io::write_token_stream(out, &stream_header(&model, tokens)))?;
        println!(
            "input={} output={} tokens={n} variant={}",
            input.display(),
            out.display(),
            model.config.variant
        );
    }
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_codec(&a.model)?;
    let voc = load_vocoder(&a.vocoder, &model)?;
    let stream = at(&a.tokens, io::read_token_stream(&a.tokens))?;
    check_stream(&stream, &model, &a.tokens)?;
    let wave = if a.stream.stream {
        let cfg = StreamConfig {
            chunk_size: a.stream.chunk,
            left_context: a.stream.left_context,
            overlap: a.stream.overlap,
        };
        vocoder::stream_decode(&stream.tokens, &model, &voc, &cfg)?
    } else {
        voc.synthesize(&model.decode_features(&stream.tokens)?)?
    };
    at(&a.out, io::write_wav(&a.out, &wave))?;
    println!(
        "output={} samples={} seconds={:.3}",
        a.out.display(),
        wave.len(),
        wave.len() as f64 / io::WAV_SAMPLE_RATE as f64
    );
    Ok(())
}

pub fn resynth(a: ResynthArgs) -> Result<()> {
    let model = load_codec(&a.model)?;
    let voc = load_vocoder(&a.vocoder, &model)?;
    let features = at(&a.features, io::read_features(&a.features))?;
    let start = Instant::now();
    let tokens = model.encode(&features)?;
    let wave = voc.synthesize(&model.decode_features(&tokens)?)?;
    let wall = start.elapsed().as_secs_f64().max(1e-9);
    at(&a.out, io::write_wav(&a.out, &wave))?;
    let audio = wave.len() as f64 / io::WAV_SAMPLE_RATE as f64;
    println!("tokens={}", tokens.len());
    println!("audio_seconds={audio:.3}");
    println!("wall_seconds={wall:.3}");
    println!("rtf={:.3}", io::measure_rtf(audio, wall)?);
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let stream = at(&a.tokens, io::read_token_stream(&a.tokens))?;
    let cfg = CodecConfig::new(stream.variant).with_latent_dim(stream.latent_dim as usize);
    cfg.validate()?;
    let mut lines = vec![
        ("variant".to_string(), stream.variant.to_string()),
        ("latent_dim".into(), stream.latent_dim.to_string()),
        ("codebook_size".into(), cfg.codebook_size().to_string()),
        ("tokens".into(), stream.tokens.len().to_string()),
    ];
    if !stream.tokens.is_empty() {
        let stats = bsq::codebook_stats(&stream.tokens, cfg.codebook_size())?;
        lines.push(("unique".into(), stats.unique.to_string()));
        lines.push(("code_usage".into(), format!("{:.4}", stats.code_usage)));
        lines.push(("normalized_entropy".into(), format!("{:.4}", stats.normalized_entropy)));
    }
    lines.push(("token_rate_hz".into(), format!("{}", cfg.token_rate_hz())));
    lines.push(("bitrate_bps".into(), format!("{}", codec::bitrate(&cfg))));
    let seconds = stream.tokens.len() as f64 / cfg.token_rate_hz();
    lines.push(("seconds".into(), format!("{seconds:.3}")));
    if let Some(path) = &a.audio {
        let wave = at(path, io::read_wav(path))?;
        let v = VocoderConfig::default();
        let mel = vocoder::log_mel(&wave, v.n_fft, v.hop, v.n_mels, v.sample_rate)?;
        let (frames, _) = mel.dims2()?;
        let mean = mel.data().iter().map(|&x| x as f64).sum::<f64>() / mel.numel().max(1) as f64;
        lines.push(("mel_frames".into(), frames.to_string()));
        lines.push(("mel_mean_log".into(), format!("{mean:.4}")));
    }
    if a.text {
        let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in lines {
            println!("{:<width$}  {v}", k.replace('_', " "));
        }
    } else {
        for (k, v) in lines {
            println!("{k}={v}");
        }
    }
    Ok(())
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let model = load_codec(&a.model)?;
    let voc = load_vocoder(&a.vocoder, &model)?;
    let source = at(&a.source, io::read_features(&a.source))?;
    let reference = at(&a.reference, io::read_features(&a.reference))?;
    let decoded = model.decode_features(&model.encode(&source)?)?;
    let converted = knn_convert(&decoded, &reference, a.k)?;
    let wave = voc.synthesize(&converted)?;
    at(&a.out, io::write_wav(&a.out, &wave))?;
    println!(
        "output={} frames={} samples={} k={}",
        a.out.display(),
        converted.dims2()?.0,
        wave.len(),
        a.k
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CodecSection {
    variant: Variant,
    width_divisor: usize,
    latent_dim: usize,
    seed: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            variant: Variant::Fc50,
            width_divisor: 16,
            latent_dim: 13,
            seed: 0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainJob {
    train: TrainConfig,
    codec: CodecSection,
    synthetic: SyntheticFeatureSpec,
}

fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::File {
        path: dir.to_path_buf(),
        source: e.into(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fcf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .fcf files in {}", dir.display())));
    }
    paths.iter().map(|p| at(p, io::read_features(p))).collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let job: TrainJob = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::File {
                path: p.clone(),
                source: e.into(),
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::File {
                path: p.clone(),
                source: focalcodec::Error::Config(e.to_string()),
            })?
        }
        None => TrainJob::default(),
    };
    let data = match &a.data {
        Some(dir) => load_dir(dir)?,
        None => trainer::generate_synthetic_features(&job.synthetic)?.utterances,
    };
    let input_dim = data[0].dims2()?.1;
    if let Some(i) = data.iter().position(|x| x.dims2().map_or(true, |d| d.1 != input_dim)) {
        return Err(CliError::Mismatch(format!(
            "utterance {i} differs in feature dim from utterance 0 ({input_dim})"
        )));
    }
    let mut cfg = CodecConfig::toy(job.codec.variant, job.codec.width_divisor)?
        .with_latent_dim(job.codec.latent_dim);
    cfg.input_dim = input_dim;
    let mut model = CodecModel::new(cfg, job.codec.seed)?;
    let history = trainer::train_stage1(&data, &mut model, &job.train)?;
    let eval = trainer::evaluate(&model, &data, &job.train)?;
    let tokens = trainer::encode_dataset(&model, &data)?;
    let stats = bsq::codebook_stats(&tokens, model.config.codebook_size())?;
    at(&a.out, io::save_codec(&a.out, &model))?;
    if let Some(path) = &a.vocoder_out {
        let voc = Vocoder::new(
            VocoderConfig {
                input_dim,
                ..VocoderConfig::toy()
            },
            job.codec.seed,
        )?;
        at(path, io::save_vocoder(path, &voc))?;
    }
    let first = history.steps.first().map_or(f64::NAN, |l| l.total);
    println!("utterances={}", data.len());
    println!("steps={}", history.steps.len());
    println!("initial_loss={first:.6}");
    println!("final_loss={:.6}", eval.total);
    println!("final_recon={:.6}", eval.recon);
    println!("final_entropy={:.6}", eval.entropy);
    println!("unique_codes={}", stats.unique);
    println!("code_usage={:.4}", stats.code_usage);
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("check={name} status={} {detail}", if ok { "pass" } else { "fail" });
    ok
}

pub fn selfcheck() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut results = Vec::new();

    let l = 10;
    let bijective = (0..1u32 << l).all(|i| {
        bsq::index_to_code(CodeIndex(i), l)
            .and_then(|c| bsq::code_index(&c))
            .is_ok_and(|j| j.0 == i)
    });
    results.push(check("bsq_bijection", bijective, format!("latent_dim={l}")));

    let mut worst = 0.0f64;
    for _ in 0..256 {
        let v = Tensor::randn([13], 1.0, &mut rng);
        let q = bsq::binary_quantize(&bsq::project_to_sphere(&v)?);
        let norm = q.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        worst = worst.max((norm - 1.0).abs());
    }
    results.push(check("bsq_unit_norm", worst < 1e-5, format!("max_dev={worst:.2e}")));

    let tokens: Vec<CodeIndex> = (0..1000).map(|_| CodeIndex(rng.random_range(0..8192))).collect();
    let packed = io::pack_tokens(&tokens, 13)?;
    let ok = packed.len() == 1625 && io::unpack_tokens(&packed, 1000, 13)? == tokens;
    results.push(check("token_packing", ok, format!("bytes={}", packed.len())));

    let rates: Vec<f64> = Variant::ALL.iter().map(|&v| codec::bitrate(&CodecConfig::new(v))).collect();
    results.push(check(
        "bitrates",
        rates == [650.0, 325.0, 162.5],
        format!("bps={rates:?}"),
    ));

    let wave: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let spec = vocoder::stft(&wave, 1024, 320)?;
    let back = vocoder::istft(&spec, 1024, 320, wave.len())?;
    let err = wave.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    results.push(check("stft_round_trip", err < 1e-4, format!("max_err={err:.2e}")));

    let w = Tensor::randn([5, 4], 0.5, &mut rng);
    let x = Tensor::randn([3, 5], 1.0, &mut rng);
    let grad_err = finite_diff_check(
        |tape: &mut Tape, x| {
            let wv = tape.constant(w.clone());
            let y = tape.linear(x, wv, None)?;
            let y = tape.gelu(y);
            Ok(tape.sum(y))
        },
        &x,
        1e-3,
    )?;
    results.push(check("gradient", grad_err < 1e-3, format!("rel_err={grad_err:.2e}")));

    let feats = Tensor::randn([20, 8], 1.0, &mut rng);
    let same = knn_convert(&feats, &feats, 1)?.max_abs_diff(&feats);
    results.push(check("knn_identity", same == 0.0, format!("max_diff={same:.2e}")));

    let samples: Vec<f32> = (0..1600).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
    let bytes = io::encode_wav(&samples)?;
    let ok = io::encode_wav(&io::decode_wav(&bytes)?)? == bytes && bytes.len() == 44 + 3200;
    results.push(check("wav_round_trip", ok, format!("bytes={}", bytes.len())));

    let total = results.len();
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("selfcheck={} checks={total}", if failed == 0 { "pass" } else { "fail" });
    if failed > 0 {
        return Err(CliError::Selfcheck { failed, total });
    }
    Ok(())
}
