//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use usqz_core::codec::{
    decode_contour, encode_contour, read_file, write_file, ChainCode, CompressedFile, CompressedHeader, RatioMode,
};
use usqz_core::grid::{rasterize_contours, ClassTable, LabelMap, ProbeGeometry, EXTERNAL, LUMEN, MEDIA};
use usqz_core::metrics::{
    attenuation_jsd, attenuation_map, inter_tissue_jsd, intra_tissue_jsd, js_divergence, region_confusion,
    region_overlap, Binning, ConfusionCounts, EvalReport, Pmf, Summary, DEFAULT_ATTENUATION_WINDOW, DEFAULT_BINS,
};
use usqz_core::pgm;
use usqz_core::phantom::{generate_items, DatasetItem, PhantomRanges, DEFAULT_FREQUENCY_KHZ};
use usqz_core::pipeline::{compress_frame, compress_labels};
use usqz_core::segmenter::{
    regularize_radii, segment_frame, train_classifier, ClassifierModel, DEFAULT_FEATURE_WINDOW,
};
use usqz_core::speckle_stats::{feature_map, nakagami_fit};
use usqz_core::synth::{decompress, decompress_polar, simulate, simulate_bmode, IdentityRefiner, SynthConfig};

const SUITE_SIZE: usize = 20;
const TRAIN_SIZE: usize = 9;
const SUITE_SEED: u64 = 2024;
const DECOMPRESS_SEED: u64 = 77;

type Outcome = std::result::Result<String, String>;

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut out = f();
        let elapsed = start.elapsed();
        if let (Some(limit), Ok(detail)) = (limit, &out) {
            if elapsed > limit {
                out = Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match out {
            Ok(detail) => println!("PASS  {id:>2}  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {id:>2}  {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ids_name(id: u8) -> &'static str {
    match id {
        LUMEN => "lumen",
        MEDIA => "media",
        EXTERNAL => "external",
        _ => "?",
    }
}

fn criterion_ratio() -> Outcome {
    let ranges = PhantomRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ranges.sample(&mut rng);
    let phantom = usqz_core::phantom::generate_phantom(&spec, 1).map_err(|e| e.to_string())?;
    let compressed =
        compress_labels(&phantom.labels, &ClassTable::ivus(), DEFAULT_FREQUENCY_KHZ).map_err(|e| e.to_string())?;
    let h = compressed.file.header;
    let paper = compressed.ratio(RatioMode::Paper);
    let actual = compressed.ratio(RatioMode::Actual);
    let exact = 786_432.0 / 1084.0;
    check(
        (h.samples_per_line, h.num_scan_lines, h.num_contours) == (384, 256, 2)
            && (paper - exact).abs() < 1e-9
            && format!("{paper:.4}").starts_with("725.4")
            && actual == h.raw_bits() as f64 / (8 * compressed.bytes.len()) as f64,
        format!(
            "paper-mode {paper:.4} (786432/1084), actual-mode {actual:.1} ({} bytes)",
            compressed.bytes.len()
        ),
    )
}

fn random_file(rng: &mut ChaCha8Rng) -> CompressedFile {
    let n_theta: u16 = rng.gen_range(1..=300);
    let n_r: u16 = rng.gen_range(1..=600);
    let count: u8 = rng.gen_range(0..=4);
    let contours = (0..count)
        .map(|_| {
            let lo = rng.gen_range(0..n_r);
            let hi = rng.gen_range(lo..n_r);
            let raw: Vec<u16> = (0..n_theta).map(|_| rng.gen_range(lo..=hi)).collect();
            encode_contour(rng.gen(), &regularize_radii(&raw)).expect("regularized radii are encodable")
        })
        .collect();
    CompressedFile {
        header: CompressedHeader {
            acquisition_frequency_khz: rng.gen_range(1..=u32::MAX),
            num_scan_lines: n_theta,
            samples_per_line: n_r,
            cart_width: rng.gen_range(1..=u16::MAX),
            cart_height: rng.gen_range(1..=u16::MAX),
            num_contours: count,
        },
        contours,
    }
}

fn criterion_lossless() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    for i in 0..10_000 {
        let file = random_file(&mut rng);
        let bytes = write_file(&file).map_err(|e| format!("set {i}: {e}"))?;
        let back = read_file(&bytes).map_err(|e| format!("set {i}: {e}"))?;
        if back != file || write_file(&back).unwrap() != bytes || bytes.len() != file.header.file_len() {
            return Err(format!("set {i} changed across write/read"));
        }
        for (c, d) in file.contours.iter().zip(&back.contours) {
            let radii = decode_contour(d, file.header.samples_per_line).map_err(|e| format!("set {i}: {e}"))?;
            let again: ChainCode = encode_contour(c.class_id, &radii).map_err(|e| format!("set {i}: {e}"))?;
            if &again != c {
                return Err(format!("set {i}: contour changed across decode/encode"));
            }
        }
    }
    Ok("10000 random contour sets identical after encode/decode and write/read".into())
}

/// Everything the phantom-suite criteria need.
struct SuiteRun {
    items: Vec<DatasetItem>,
    decompressed: Vec<usqz_core::grid::PolarFrame>,
    resegmented: Vec<LabelMap>,
    compressed_bytes: Vec<Vec<u8>>,
    model: ClassifierModel,
    realization_floor: BTreeMap<String, Vec<f64>>,
}

fn run_suite(config: &SynthConfig) -> usqz_core::Result<SuiteRun> {
    let items = generate_items(
        SUITE_SIZE,
        &PhantomRanges::default(),
        config,
        DEFAULT_FREQUENCY_KHZ,
        SUITE_SEED,
    )?;
    let log = config.log();
    let train = &items[..TRAIN_SIZE];
    let stacks = train
        .iter()
        .map(|it| feature_map(&it.frame, DEFAULT_FEATURE_WINDOW, log))
        .collect::<usqz_core::Result<Vec<_>>>()?;
    let labels: Vec<LabelMap> = train.iter().map(|it| it.phantom.labels.clone()).collect();
    let model = train_classifier(&stacks, &labels)?;

    let mut decompressed = Vec::new();
    let mut compressed_bytes = Vec::new();
    let mut resegmented = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let c = compress_frame(&it.frame, &model, DEFAULT_FREQUENCY_KHZ)?;
        let d = decompress_polar(&c.bytes, config, DECOMPRESS_SEED + i as u64, &IdentityRefiner)?;
        if i >= TRAIN_SIZE {
            let seg = segment_frame(&d.frame, &model)?;
            resegmented.push(rasterize_contours(&seg.contours, &it.phantom.labels.geometry)?);
        }
        decompressed.push(d.frame);
        compressed_bytes.push(c.bytes);
    }

    let table = ClassTable::ivus();
    let binning = Binning::intensity(DEFAULT_BINS)?;
    let mut realization_floor: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for it in &items {
        let again = simulate_bmode(
            &it.phantom.labels,
            config,
            DEFAULT_FREQUENCY_KHZ as f64 / 1000.0,
            it.simulation_seed ^ 0x5eed,
        )?;
        for v in intra_tissue_jsd(&it.frame, &again, &it.phantom.labels, &table, binning)? {
            realization_floor
                .entry(ids_name(v.class).into())
                .or_default()
                .push(v.value);
        }
    }
    Ok(SuiteRun {
        items,
        decompressed,
        resegmented,
        compressed_bytes,
        model,
        realization_floor,
    })
}

fn per_class_means(values: &BTreeMap<String, Vec<f64>>) -> Vec<(String, Summary)> {
    values.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect()
}

fn describe(rows: &[(String, Summary)]) -> String {
    rows.iter()
        .map(|(k, s)| format!("{k} {s}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_speckle(run: &SuiteRun) -> Outcome {
    let table = ClassTable::ivus();
    let binning = Binning::intensity(DEFAULT_BINS).unwrap();
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (it, d) in run.items.iter().zip(&run.decompressed) {
        for v in intra_tissue_jsd(&it.frame, d, &it.phantom.labels, &table, binning).map_err(|e| e.to_string())? {
            per_class.entry(ids_name(v.class).into()).or_default().push(v.value);
        }
    }
    let rows = per_class_means(&per_class);
    let floor: Vec<(String, f64)> = run
        .realization_floor
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().cloned().fold(0.0, f64::max)))
        .collect();
    let floor_text = floor
        .iter()
        .map(|(k, v)| format!("{k} {v:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        rows.iter().all(|(_, s)| s.mean <= 0.15) && floor.iter().all(|(_, v)| *v <= 0.05),
        format!(
            "intra-tissue JSD {} (limit 0.15); two-seed floor, worst frame per class: {floor_text} (limit 0.05)",
            describe(&rows)
        ),
    )
}

fn criterion_contrast(run: &SuiteRun) -> Outcome {
    let table = ClassTable::ivus();
    let binning = Binning::intensity(DEFAULT_BINS).unwrap();
    let mut diffs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut orig: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut dec: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (it, d) in run.items.iter().zip(&run.decompressed) {
        let a = inter_tissue_jsd(&it.frame, &it.phantom.labels, &table, binning).map_err(|e| e.to_string())?;
        let b = inter_tissue_jsd(d, &it.phantom.labels, &table, binning).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            let key = format!("{}-{}", ids_name(x.a), ids_name(x.b));
            diffs.entry(key.clone()).or_default().push((x.value - y.value).abs());
            orig.entry(key.clone()).or_default().push(x.value);
            dec.entry(key).or_default().push(y.value);
        }
    }
    let rows = per_class_means(&diffs);
    check(
        rows.iter().all(|(_, s)| s.mean <= 0.10),
        format!(
            "|ΔJSD| {} (limit 0.10); original {}; decompressed {}",
            describe(&rows),
            describe(&per_class_means(&orig)),
            describe(&per_class_means(&dec))
        ),
    )
}

fn criterion_attenuation(run: &SuiteRun, config: &SynthConfig) -> Outcome {
    let table = ClassTable::ivus();
    let binning = Binning::slope(DEFAULT_BINS).unwrap();
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (it, d) in run.items.iter().zip(&run.decompressed) {
        let a = attenuation_map(&it.frame, DEFAULT_ATTENUATION_WINDOW, config.log()).map_err(|e| e.to_string())?;
        let b = attenuation_map(d, DEFAULT_ATTENUATION_WINDOW, config.log()).map_err(|e| e.to_string())?;
        for v in attenuation_jsd(&a, &b, &it.phantom.labels, &table, binning).map_err(|e| e.to_string())? {
            per_class.entry(ids_name(v.class).into()).or_default().push(v.value);
        }
    }
    let rows = per_class_means(&per_class);
    check(
        rows.iter().all(|(_, s)| s.mean <= 0.10),
        format!("slope-histogram JSD {} (limit 0.10)", describe(&rows)),
    )
}

fn criterion_resegmentation(run: &SuiteRun) -> Outcome {
    let mut dice: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut se: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (it, pred) in run.items[TRAIN_SIZE..].iter().zip(&run.resegmented) {
        for (name, region) in [("lumen", &[LUMEN][..]), ("vessel", &[LUMEN, MEDIA][..])] {
            let m = region_overlap(pred, &it.phantom.labels, region).map_err(|e| e.to_string())?;
            dice.entry(name.into()).or_default().push(m.dice);
            se.entry(name.into()).or_default().push(m.se);
        }
    }
    let d = per_class_means(&dice);
    let s = per_class_means(&se);
    check(
        d.iter().all(|(_, x)| x.mean >= 0.85) && s.iter().all(|(_, x)| x.mean >= 0.95),
        format!(
            "{} held-out frames; Dice {} (limit 0.85); SE {} (limit 0.95)",
            run.resegmented.len(),
            describe(&d),
            describe(&s)
        ),
    )
}

fn criterion_rayleigh() -> Outcome {
    let mut config = SynthConfig::default();
    for p in config.tissue.classes.values_mut() {
        p.attenuation = 0.0;
    }
    let g = ProbeGeometry::ivus(384, 256);
    let labels = LabelMap::filled(g, MEDIA);
    let sim = simulate(&labels, &config, 20.0, 3).map_err(|e| e.to_string())?;
    let mut amps = Vec::new();
    for r in 32..g.samples_per_line - 32 {
        for t in 0..g.num_scan_lines {
            amps.push(sim.envelope[g.index(r, t)]);
        }
    }
    let fit = nakagami_fit(&amps).map_err(|e| e.to_string())?;
    check(
        (0.85..=1.15).contains(&fit.m) && amps.len() >= 10_000,
        format!(
            "Nakagami m = {:.4} over {} envelope samples (limits [0.85, 1.15])",
            fit.m,
            amps.len()
        ),
    )
}

fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let entropy = |x: &[f64]| -> f64 { -x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}

fn random_pmf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < 0.2 { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn criterion_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ln2 = std::f64::consts::LN_2;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let (p, q) = (random_pmf(&mut rng, n), random_pmf(&mut rng, n));
        let (pp, qq) = (
            Pmf::from_probs(p.clone(), 1).unwrap(),
            Pmf::from_probs(q.clone(), 1).unwrap(),
        );
        let d = js_divergence(&pp, &qq).unwrap();
        worst = worst.max((d - oracle_jsd(&p, &q)).abs());
        if d != js_divergence(&qq, &pp).unwrap() || !(0.0..=ln2).contains(&d) || js_divergence(&pp, &pp).unwrap() != 0.0
        {
            return Err(format!("bounds, symmetry or identity violated for {p:?} vs {q:?}"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("max deviation from summation oracle {worst:e}"));
    }
    // every pair of 3-bin pmfs on a 1/10 lattice
    let lattice: Vec<Vec<f64>> = (0..=10)
        .flat_map(|a| (0..=10 - a).map(move |b| vec![a as f64 / 10.0, b as f64 / 10.0, (10 - a - b) as f64 / 10.0]))
        .collect();
    let mut pairs = 0;
    for p in &lattice {
        for q in &lattice {
            let (pp, qq) = (
                Pmf::from_probs(p.clone(), 1).unwrap(),
                Pmf::from_probs(q.clone(), 1).unwrap(),
            );
            let d = js_divergence(&pp, &qq).unwrap();
            if d != js_divergence(&qq, &pp).unwrap() || !(0.0..=ln2).contains(&d) || (p == q) != (d < 1e-12) {
                return Err(format!("lattice pair {p:?} {q:?} gives {d}"));
            }
            pairs += 1;
        }
    }
    // Dice = 2·PPV·SE / (PPV + SE) on every count triple up to 40
    let mut triples = 0;
    for tp in 1..=40u64 {
        for fp in 0..=40u64 {
            for fn_ in 0..=40u64 {
                let c = ConfusionCounts { tp, fp, tn: 7, fn_ };
                let ppv = Ratio::new(tp, tp + fp);
                let se = Ratio::new(tp, tp + fn_);
                let dice = Ratio::new(2 * tp, 2 * tp + fp + fn_);
                if Ratio::from_integer(2) * ppv * se / (ppv + se) != dice {
                    return Err(format!("identity fails for {c:?}"));
                }
                let m = c.metrics().map_err(|e| e.to_string())?;
                let exact = *dice.numer() as f64 / *dice.denom() as f64;
                if m.dice != exact {
                    return Err(format!("Dice {} differs from exact {exact} for {c:?}", m.dice));
                }
                triples += 1;
            }
        }
    }
    Ok(format!(
        "1000 random pmfs within {worst:.1e} of oracle; {pairs} lattice pairs bounded and symmetric; Dice identity exact on {triples} count triples"
    ))
}

/// Full pipeline for two phantoms, returning every file artifact by name.
fn pipeline_artifacts(config: &SynthConfig, dir: &Path) -> usqz_core::Result<BTreeMap<String, Vec<u8>>> {
    let items = generate_items(2, &PhantomRanges::default(), config, DEFAULT_FREQUENCY_KHZ, 11)?;
    usqz_core::phantom::write_dataset(&items, DEFAULT_FREQUENCY_KHZ, dir)?;
    let stacks = vec![feature_map(&items[0].frame, DEFAULT_FEATURE_WINDOW, config.log())?];
    let model = train_classifier(&stacks, &[items[0].phantom.labels.clone()])?;
    model.save(&dir.join("model.bin"))?;
    let table = ClassTable::ivus();
    let mut report = EvalReport::default();
    for it in &items {
        let c = compress_frame(&it.frame, &model, DEFAULT_FREQUENCY_KHZ)?;
        pgm::write_atomic(&dir.join(format!("{}_compressed.usqz", it.id)), &c.bytes)?;
        let d = decompress_polar(&c.bytes, config, 5, &IdentityRefiner)?;
        pgm::write(
            &dir.join(format!("{}_decompressed.pgm", it.id)),
            &pgm::polar_to_image(&d.frame),
        )?;
        let cart = decompress(&c.bytes, config, 5)?;
        pgm::write(
            &dir.join(format!("{}_cartesian.pgm", it.id)),
            &pgm::GrayImage {
                width: cart.width,
                height: cart.height,
                pixels: cart.pixels,
            },
        )?;
        let binning = Binning::intensity(DEFAULT_BINS)?;
        for v in intra_tissue_jsd(&it.frame, &d.frame, &it.phantom.labels, &table, binning)? {
            report.push(&it.id, "intra_jsd", ids_name(v.class), v.value);
        }
        let m = region_confusion(&d.labels, &it.phantom.labels, &[LUMEN])?.metrics()?;
        report.push(&it.id, "dice", "lumen", m.dice);
    }
    pgm::write_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())?;
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path)?,
        );
    }
    Ok(out)
}

fn golden_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline.sha256")
}

fn criterion_determinism(config: &SynthConfig) -> Outcome {
    let a_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_artifacts(config, a_dir.path()).map_err(|e| e.to_string())?;
    let b = pipeline_artifacts(config, b_dir.path()).map_err(|e| e.to_string())?;
    if a != b {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        return Err(format!("artifacts differ between runs: {differing:?}"));
    }
    let digest: String = a
        .iter()
        .map(|(name, bytes)| format!("{:x}  {name}\n", Sha256::digest(bytes)))
        .collect();
    if std::env::var_os("USQZ_BLESS").is_some() {
        std::fs::write(golden_path(), &digest).map_err(|e| e.to_string())?;
    }
    let golden = std::fs::read_to_string(golden_path()).map_err(|e| format!("golden digests: {e}"))?;
    check(
        golden == digest,
        format!(
            "{} artifacts byte-identical across two runs and equal to the checked-in digests",
            a.len()
        ),
    )
}

fn main() {
    let mut runner = Runner { failures: 0 };
    let config = SynthConfig::default();
    runner.run("1", "compression ratio", Some(Duration::from_secs(1)), criterion_ratio);
    runner.run(
        "2",
        "codec losslessness",
        Some(Duration::from_secs(10)),
        criterion_lossless,
    );

    let start = Instant::now();
    let suite = run_suite(&config);
    let suite_time = start.elapsed();
    match suite {
        Ok(run) => {
            println!(
                "      phantom suite: {SUITE_SIZE} phantoms, {} compressed bytes each, built in {suite_time:.2?}",
                run.compressed_bytes[0].len()
            );
            let _ = &run.model;
            let limit = Duration::from_secs(120).saturating_sub(suite_time);
            runner.run("3", "speckle realism", Some(limit), || criterion_speckle(&run));
            runner.run("4", "contrast preservation", None, || criterion_contrast(&run));
            runner.run("5", "attenuation consistency", None, || {
                criterion_attenuation(&run, &config)
            });
            runner.run("6", "re-segmentation", None, || criterion_resegmentation(&run));
        }
        Err(e) => {
            for (id, name) in [
                ("3", "speckle realism"),
                ("4", "contrast preservation"),
                ("5", "attenuation consistency"),
                ("6", "re-segmentation"),
            ] {
                runner.run(id, name, None, || Err(format!("phantom suite failed: {e}")));
            }
        }
    }
    runner.run("7", "speckle statistics", None, criterion_rayleigh);
    runner.run("8", "metric oracles", None, criterion_metric_oracles);
    runner.run("9", "determinism", None, || criterion_determinism(&config));

    if runner.failures > 0 {
        println!("{} acceptance criteria failed", runner.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
