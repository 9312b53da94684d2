use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use favae::evalkit::{
    auroc, export_toy, histogram, render, shared_edges, write_histograms_csv, write_png, write_png16, EvalReport,
    Histogram, Label, LabeledSample, Population, Split, ToyExport, ToyMeta,
};
use favae::extractor::{Backbone, Mode, TapConfig};
use favae::nn::weights::load_pack;
use favae::scoring::{
    classic_pixel_max, elbo_scores, favae_maps, image_score, typicality_score, typicality_scores,
    write_scores_csv, AnomalyMap, ScoreKind, ScoreRecord,
};
use favae::toy::{sample_anomaly, sample_normal, sample_patched, shuffle_pixels, AnalyticVae, ToySpec};
use favae::train::{correct, train, BatchSource, Correction, ToyNormalSource};
use favae::{Error, Model, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve_mode, Fig1Score, RunConfig};
use crate::data::{as_batch, common_dims, fit, fit_mask, load_split, read_input, ImageSource};
use crate::{Cli, Command, Common};

struct Ctx {
    cfg: RunConfig,
    common: Common,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn data_root(&self, what: &str) -> Result<&Path> {
        self.cfg
            .data
            .root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{what} needs a dataset (--data or data.root)")))
    }

    /// Trained model from `--weights`, else `<out>/model.fvw`.
    fn model(&self) -> Result<Model> {
        let path = self.common.weights.clone().unwrap_or_else(|| self.out("model.fvw"));
        if !path.is_file() {
            return Err(Error::MissingWeights(format!("no model at {}", path.display())));
        }
        Model::load(&path)
    }

    fn toy_meta(&self) -> Result<Option<ToyMeta>> {
        match &self.cfg.data.root {
            Some(root) => ToyMeta::load(root),
            None => Ok(None),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli { command, common } = cli;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data.root = Some(d.clone());
    }
    if let Some(b) = common.backbone {
        cfg.model.backbone = Some(b);
    }
    if let Some(a) = &common.ablation {
        cfg.model.ablation = Some(a.clone());
    }
    match &command {
        Command::Toygen { preset, side } => {
            if let Some(p) = preset {
                cfg.toy.preset = *p;
            }
            if side.is_some() {
                cfg.toy.side = *side;
            }
        }
        Command::Fig1 { score } if !score.is_empty() => cfg.fig1.scores = score.clone(),
        Command::Render { input: Some(i) } => cfg.render.input = Some(i.clone()),
        Command::Correct { input: Some(i) } => cfg.correct.input = Some(i.clone()),
        _ => {}
    }
    cfg.train.validate()?;
    fs::create_dir_all(&common.out)?;
    let ctx = Ctx { cfg, common };
    let name = match &command {
        Command::Toygen { .. } => "toygen",
        Command::Train => "train",
        Command::Score => "score",
        Command::Eval => "eval",
        Command::Fig1 { .. } => "fig1",
        Command::Render { .. } => "render",
        Command::Correct { .. } => "correct",
    };
    let echo = serde_json::json!({ "command": name, "config": ctx.cfg });
    fs::write(ctx.out("run.json"), serde_json::to_string_pretty(&echo)?)?;
    match command {
        Command::Toygen { .. } => toygen(&ctx),
        Command::Train => train_cmd(&ctx),
        Command::Score => score_cmd(&ctx).map(|_| ()),
        Command::Eval => eval_cmd(&ctx),
        Command::Fig1 { .. } => fig1(&ctx),
        Command::Render { .. } => render_cmd(&ctx),
        Command::Correct { .. } => correct_cmd(&ctx),
    }
}

fn toygen(ctx: &Ctx) -> Result<()> {
    let t = &ctx.cfg.toy;
    let spec = t.spec(ctx.cfg.seed)?;
    for sub in ["train", "test", "ground_truth"] {
        let p = ctx.out(sub);
        if p.exists() {
            return Err(Error::Layout {
                path: p,
                detail: "output directory already holds a dataset".into(),
            });
        }
    }
    let mut rng = spec.rng();
    let train = sample_normal(&spec, t.n_train, &mut rng);
    let test_normal = sample_normal(&spec, t.n_test, &mut rng);
    let patched;
    let stripes;
    let shuffled;
    let test_anomalous = if t.localization {
        patched = sample_patched(&spec, t.n_test, &mut rng);
        vec![("stripe_patch", &patched.0, Some(patched.1.as_slice()))]
    } else {
        stripes = sample_anomaly(&spec, t.n_test, &mut rng);
        shuffled = shuffle_pixels(&stripes, &mut rng);
        vec![("stripe", &stripes, None), ("shuffled", &shuffled, None)]
    };
    let meta = export_toy(
        &ctx.common.out,
        &ToyExport {
            spec: &spec,
            train: &train,
            test_normal: &test_normal,
            test_anomalous,
        },
    )?;
    println!(
        "sigma_n={} sigma_a={} psi={} side={} sigma_e={} d={}",
        spec.sigma_n,
        spec.sigma_a,
        spec.psi,
        spec.side,
        spec.sigma_e,
        spec.d()
    );
    println!("wrote {} (intensity range [{:.4}, {:.4}])", ctx.common.out.display(), meta.lo, meta.hi);
    Ok(())
}

fn build_model(ctx: &Ctx, channels: usize, h: usize, w: usize) -> Result<Model> {
    let (mode, backbone) = resolve_mode(ctx.common.mode, ctx.cfg.model.backbone, ctx.cfg.model.ablation.as_deref())?;
    let taps = TapConfig::new(backbone, mode)?;
    let spec = ctx.cfg.model.spec(channels, h, w);
    spec.validate()?;
    let mut model = Model::new(spec, taps, ctx.cfg.seed)?;
    let pretrained = matches!(backbone, Backbone::Vgg16 | Backbone::Resnet18)
        && matches!(mode, Mode::PretrainedFrozen | Mode::Unfrozen);
    if pretrained {
        let path = ctx.common.weights.as_ref().ok_or_else(|| {
            Error::MissingWeights(format!("{backbone:?} backbone needs a weight pack (--weights)"))
        })?;
        model.load_backbone(&load_pack(path)?)?;
    }
    eprintln!("mode {} ({mode:?}), backbone {backbone:?}", mode.label());
    Ok(model)
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let (mut model, mut source): (Model, Box<dyn BatchSource>) = match &ctx.cfg.data.root {
        Some(root) => {
            let (samples, _) = load_split(root, ctx.cfg.data.layout, Split::Train)?;
            common_dims(&samples)?;
            let images: Vec<Tensor> = samples.into_iter().map(|s| s.image).collect();
            let src = ImageSource::new(images, ctx.cfg.data.recipe.clone())?;
            let [c, h, w] = src.output_dims()?;
            (build_model(ctx, c, h, w)?, Box::new(src))
        }
        None => {
            let spec = ctx.cfg.toy.spec(ctx.cfg.seed)?;
            let side = spec.side;
            (build_model(ctx, 1, side, side)?, Box::new(ToyNormalSource(spec)))
        }
    };
    let total = ctx.cfg.train.total_steps();
    let every = (total / 20).max(1);
    let history = train(&mut model, source.as_mut(), &ctx.cfg.train, |row| {
        if row.step % every == 0 || row.step + 1 == total {
            eprintln!("step {}/{total} epoch {} loss {:.6e}", row.step + 1, row.epoch, row.loss.total);
        }
    })?;
    model.save(ctx.out("model.fvw"))?;
    history.write_csv(BufWriter::new(File::create(ctx.out("loss.csv"))?))?;
    if let Some((head, tail)) = history.head_tail_means(10) {
        println!("loss {head:.6e} -> {tail:.6e} over {total} steps");
    }
    Ok(())
}

struct Scored {
    samples: Vec<LabeledSample>,
    /// `(kind, raw score per sample)`.
    scores: Vec<(ScoreKind, Vec<f64>)>,
    maps: Vec<AnomalyMap>,
    /// Masks at map resolution; `None` when any anomalous sample lacks one.
    masks: Option<Vec<Vec<bool>>>,
}

fn score_cmd(ctx: &Ctx) -> Result<Scored> {
    let model = ctx.model()?;
    let root = ctx.data_root("score")?;
    let (samples, _) = load_split(root, ctx.cfg.data.layout, Split::Test)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no test images under {}", root.display())));
    }
    let sc = &ctx.cfg.score;
    if sc.batch_size == 0 {
        return Err(Error::Config("score.batch_size must be positive".into()));
    }
    let spec = model.spec();
    let (h, w) = (spec.height, spec.width);
    let mut scores: Vec<(ScoreKind, Vec<f64>)> = sc.kinds.iter().map(|&k| (k, Vec::new())).collect();
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(sc.batch_size) {
        let imgs = chunk.iter().map(|s| fit(&s.image, h, w)).collect::<Result<Vec<_>>>()?;
        let x = as_batch(&imgs.iter().collect::<Vec<_>>())?;
        let fused = favae_maps(&model, &x)?.fused;
        for (kind, out) in &mut scores {
            match kind {
                ScoreKind::Favae => out.extend(fused.iter().map(image_score)),
                ScoreKind::Elbo => out.extend(elbo_scores(&model, &x)?),
                ScoreKind::Typicality => out.extend(typicality_scores(&x, &model)?),
                ScoreKind::ClassicPixelMax => out.extend(classic_pixel_max(&x, &model)?),
                ScoreKind::Loglik => {
                    return Err(Error::Config("the loglik score needs the analytic toy model; use fig1".into()))
                }
            }
        }
        maps.extend(fused);
    }
    let mut records = Vec::new();
    for (kind, vals) in &scores {
        for (s, &v) in samples.iter().zip(vals) {
            records.push(ScoreRecord::new(&s.id, *kind, v)?);
        }
    }
    write_scores_csv(BufWriter::new(File::create(ctx.out("scores.csv"))?), &records)?;
    if sc.maps {
        let dir = ctx.out("maps");
        fs::create_dir_all(&dir)?;
        let pop = Population::new(maps.iter().flat_map(|m| m.values.iter().copied()))?;
        for (s, m) in samples.iter().zip(&maps) {
            render(m, sc.render_mode, &pop, &dir.join(format!("{}.png", s.id.replace('/', "_"))))?;
        }
    }
    let masks = samples
        .iter()
        .map(|s| {
            let (sh, sw) = (s.image.dims()[1], s.image.dims()[2]);
            match (&s.label, &s.mask) {
                (Label::Normal, _) => Some(vec![false; h * w]),
                (Label::Anomalous, Some(m)) => Some(fit_mask(m, (sh, sw), h, w)),
                (Label::Anomalous, None) => None,
            }
        })
        .collect::<Option<Vec<_>>>();
    println!("scored {} test images with {}", samples.len(), kind_list(&sc.kinds));
    Ok(Scored {
        samples,
        scores,
        maps,
        masks,
    })
}

fn kind_list(kinds: &[ScoreKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}

fn eval_cmd(ctx: &Ctx) -> Result<()> {
    let scored = score_cmd(ctx)?;
    let labels: Vec<Label> = scored.samples.iter().map(|s| s.label).collect();
    let mut summary = Vec::new();
    let mut primary = None;
    for (kind, vals) in &scored.scores {
        let pairs: Vec<(Label, f64)> = labels.iter().zip(vals).map(|(&l, &v)| (l, kind.to_anomaly(v))).collect();
        let loc = if *kind == ScoreKind::Favae {
            scored
                .masks
                .as_ref()
                .filter(|m| m.iter().any(|m| m.iter().any(|&b| b)))
                .map(|m| (scored.maps.as_slice(), m.as_slice()))
        } else {
            None
        };
        let cfg = serde_json::json!({ "score": kind.name(), "run": ctx.cfg });
        let report = EvalReport::from_scores(&pairs, loc, ctx.cfg.score.bins, cfg)?;
        summary.push((kind.name(), report.image_auroc, report.pixel_auroc));
        if primary.is_none() {
            primary = Some(report);
        }
    }
    let report = primary.ok_or_else(|| Error::Config("score.kinds is empty".into()))?;
    report.write_json(&ctx.out("report.json"))?;
    let groups: Vec<(String, Histogram)> = report.histograms.iter().map(|(k, h)| (k.clone(), h.clone())).collect();
    write_histograms_csv(BufWriter::new(File::create(ctx.out("histograms.csv"))?), &groups)?;
    let mut f = BufWriter::new(File::create(ctx.out("auroc.csv"))?);
    writeln!(f, "kind,image_auroc,pixel_auroc")?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for (kind, img, pix) in &summary {
        writeln!(f, "{kind},{},{}", fmt(*img), fmt(*pix))?;
        println!("{kind:>18}  image AUROC {:>8}  pixel AUROC {:>8}", fmt(*img), fmt(*pix));
    }
    Ok(())
}

fn rows(batch: &Tensor) -> impl Iterator<Item = &[f64]> {
    let n = batch.dims()[0];
    let per = batch.len() / n.max(1);
    batch.data().chunks(per)
}

fn fig1_scores(ctx: &Ctx, score: Fig1Score, spec: &ToySpec, batch: &Tensor, model: Option<&Model>) -> Result<Vec<f64>> {
    match score {
        Fig1Score::AnalyticLoglik => {
            let vae = AnalyticVae::new(spec);
            rows(batch).map(|x| vae.loglik(x)).collect()
        }
        Fig1Score::Typicality => {
            let vae = AnalyticVae::new(spec);
            rows(batch).map(|x| typicality_score(x, &vae)).collect()
        }
        Fig1Score::Favae => {
            let model = model.ok_or_else(|| Error::MissingWeights("favae histogram needs a trained model".into()))?;
            let n = batch.dims()[0];
            let bs = ctx.cfg.score.batch_size.max(1);
            let mut out = Vec::with_capacity(n);
            for lo in (0..n).step_by(bs) {
                let items: Vec<Tensor> = (lo..(lo + bs).min(n)).map(|i| batch.sample(i)).collect();
                out.extend(favae_maps(model, &Tensor::stack(&items)?)?.fused.iter().map(image_score));
            }
            Ok(out)
        }
    }
}

fn kind_of(score: Fig1Score) -> ScoreKind {
    match score {
        Fig1Score::AnalyticLoglik => ScoreKind::Loglik,
        Fig1Score::Typicality => ScoreKind::Typicality,
        Fig1Score::Favae => ScoreKind::Favae,
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn fig1(ctx: &Ctx) -> Result<()> {
    let f = &ctx.cfg.fig1;
    if f.n == 0 || f.bins == 0 {
        return Err(Error::Config("fig1.n and fig1.bins must be positive".into()));
    }
    let spec = ctx.cfg.toy.spec(ctx.cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let normal = sample_normal(&spec, f.n, &mut rng);
    let anomalous = sample_anomaly(&spec, f.n, &mut rng);
    // Pixel-shuffled twins of the anomalies: same per-image pixel values,
    // no spatial structure.
    let shuffled = shuffle_pixels(&anomalous, &mut rng);
    let model = if f.scores.contains(&Fig1Score::Favae) {
        Some(ctx.model()?)
    } else {
        None
    };
    let mut summary = serde_json::Map::new();
    for &score in &f.scores {
        let groups = [("normal", &normal), ("anomalous", &anomalous), ("shuffled", &shuffled)]
            .iter()
            .map(|(name, b)| Ok((name.to_string(), fig1_scores(ctx, score, &spec, b, model.as_ref())?)))
            .collect::<Result<Vec<_>>>()?;
        let slices: Vec<&[f64]> = groups.iter().map(|g| g.1.as_slice()).collect();
        let edges = shared_edges(&slices, f.bins)?;
        let hists: Vec<(String, Histogram)> = groups.iter().map(|(n, v)| (n.clone(), histogram(v, &edges))).collect();
        let name = score.name();
        write_histograms_csv(BufWriter::new(File::create(ctx.out(&format!("fig1_{name}.csv")))?), &hists)?;
        fs::write(ctx.out(&format!("fig1_{name}.svg")), histogram_svg(name, &hists))?;
        let kind = kind_of(score);
        let anom = |v: &[f64]| v.iter().map(|&x| kind.to_anomaly(x)).collect::<Vec<_>>();
        let (n, a, s) = (anom(slices[0]), anom(slices[1]), anom(slices[2]));
        let (mn, ma, ms) = (median(slices[0]), median(slices[1]), median(slices[2]));
        let entry = serde_json::json!({
            "median_normal": mn,
            "median_anomalous": ma,
            "median_shuffled": ms,
            "shuffled_closer_to_normal": (ms - mn).abs() < (ms - ma).abs(),
            "auroc_anomalous": auroc(&a, &n)?,
            "auroc_shuffled": auroc(&s, &n)?,
        });
        println!("{name}: {entry}");
        summary.insert(name.to_string(), entry);
    }
    fs::write(ctx.out("fig1_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Step-outline histograms of each group on shared bins.
fn histogram_svg(title: &str, groups: &[(String, Histogram)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let edges = &groups[0].1.edges;
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let peak = groups.iter().flat_map(|g| g.1.counts.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let sx = |v: f64| PAD + (v - lo) / (hi - lo).max(f64::MIN_POSITIVE) * (W - 2.0 * PAD);
    let sy = |c: f64| H - PAD - c / peak * (H - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{yl}\">{lo:.4e}</text>\n\
         <text x=\"{x1}\" y=\"{yl}\" text-anchor=\"end\">{hi:.4e}</text>\n",
        y0 = H - PAD,
        x1 = W - PAD,
        yl = H - PAD + 16.0,
    );
    for (k, (name, h)) in groups.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let mut pts = vec![format!("{:.2},{:.2}", sx(lo), sy(0.0))];
        for (b, &c) in h.counts.iter().enumerate() {
            let y = sy(c as f64);
            pts.push(format!("{:.2},{:.2}", sx(h.edges[b]), y));
            pts.push(format!("{:.2},{:.2}", sx(h.edges[b + 1]), y));
        }
        pts.push(format!("{:.2},{:.2}", sx(hi), sy(0.0)));
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\" text-anchor=\"end\">{name}</text>\n",
            pts.join(" "),
            W - PAD,
            20.0 + 14.0 * k as f64,
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn input_image(ctx: &Ctx, input: Option<&PathBuf>, model: &Model) -> Result<(Tensor, Option<ToyMeta>)> {
    let path = input.ok_or_else(|| Error::Config("an input image is required (--input)".into()))?;
    let meta = ctx.toy_meta()?;
    let x = read_input(path, meta.as_ref())?;
    let spec = model.spec();
    let img = fit(&x.sample(0).reshape(&x.dims()[1..])?, spec.height, spec.width)?;
    Ok((as_batch(&[&img])?, meta))
}

fn render_cmd(ctx: &Ctx) -> Result<()> {
    let model = ctx.model()?;
    let (x, _) = input_image(ctx, ctx.cfg.render.input.as_ref(), &model)?;
    let map = favae_maps(&model, &x)?.fused.remove(0);
    let pop = Population::new(map.values.iter().copied())?;
    render(&map, ctx.cfg.render.mode, &pop, &ctx.out("render.png"))?;
    println!("image score {:.6e}", image_score(&map));
    Ok(())
}

fn correct_cmd(ctx: &Ctx) -> Result<()> {
    let model = ctx.model()?;
    let c = &ctx.cfg.correct;
    let (x, meta) = input_image(ctx, c.input.as_ref(), &model)?;
    let (step, out) = match c.step_size {
        Some(s) => (s, correct(&x, &model, c.lambda, c.steps, s)?),
        None => auto_correct(&x, &model, c.lambda, c.steps)?,
    };
    let img = out.image.sample(0).reshape(&out.image.dims()[1..])?;
    match &meta {
        Some(m) => write_png16(&ctx.out("corrected.png"), &img.map(|v| m.to_unit(v).clamp(0.0, 1.0)))?,
        None => write_png(&ctx.out("corrected.png"), &img.map(|v| v.clamp(0.0, 1.0)))?,
    }
    let mut f = BufWriter::new(File::create(ctx.out("trace.csv"))?);
    writeln!(f, "step,objective")?;
    for (i, v) in out.trace.iter().enumerate() {
        writeln!(f, "{i},{v:.10e}")?;
    }
    println!(
        "objective {:.6e} -> {:.6e} in {} steps of {step:.3e}",
        out.trace[0],
        out.trace[out.trace.len() - 1],
        c.steps
    );
    Ok(())
}

/// Starts at `0.5·γ_min²` of the pixel decoder and halves the step until
/// the run stays finite and ends below where it started. Feature spaces add
/// curvature that the pixel γ does not see.
fn auto_correct(x: &Tensor, model: &Model, lambda: f64, steps: usize) -> Result<(f64, Correction)> {
    let g = model.vae.log_gamma(0).iter().map(|l| l.exp()).fold(f64::INFINITY, f64::min);
    let mut step = 0.5 * g * g;
    for _ in 0..40 {
        match correct(x, model, lambda, steps, step) {
            Ok(c) if c.trace[c.trace.len() - 1] <= c.trace[0] => return Ok((step, c)),
            Ok(_) | Err(Error::NonFinite(_)) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NonFinite("correction diverged at every step size tried".into()))
}
