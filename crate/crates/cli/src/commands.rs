use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use segforge_core::analysis::{estimate_memory, recommend_batch};
use segforge_core::bench::{
    average_power, emit_report, parse_power_log, time_inference, BenchReport, PowerFormat, ReportFormat,
};
use segforge_core::executor::{autotune, execute_planned, execute_single, kernels, plan_memory, KernelChoice};
use segforge_core::graph::{Graph, TensorSpec};
use segforge_core::metrics::{category_iou, class_iou, ConfusionMatrix, IouTable, LabelSchema};
use segforge_core::optimizer::{run_pipeline_with, PipelineConfig};
use segforge_core::tensor::{read_image_pnm, resize_nearest, write_image_pnm, Tensor};
use segforge_core::zoo::{build_encoder, build_fcn, FcnVariant, InitSpec};
use segforge_core::{modelfile, synth};

use crate::{Arch, BenchArgs, BuildArgs, EstimateArgs, EvalArgs, Format, Init, OptimizeArgs, PowerFormatArg, RunArgs, Usage};

fn csv_line<I: IntoIterator<Item = S>, S: AsRef<str>>(fields: I) -> String {
    fields
        .into_iter()
        .map(|f| {
            let f = f.as_ref();
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn load(path: &Path) -> Result<Graph> {
    modelfile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn model_input(g: &Graph) -> Result<TensorSpec> {
    g.input_spec()
        .ok_or_else(|| Usage(format!("model `{}` does not record its input size", g.name)).into())
}

pub fn build(a: &BuildArgs, format: Format) -> Result<()> {
    let init = match a.init {
        Init::Zeros => InitSpec::zeros(),
        Init::Normal => InitSpec::normal(0.0, a.stddev, a.seed),
    };
    let g = match a.arch {
        Arch::Encoder => build_encoder(a.height, a.width, a.classes, init)?,
        Arch::Fcn8s => build_fcn(FcnVariant::Fcn8s, a.height, a.width, a.classes, init)?,
        Arch::Fcn16s => build_fcn(FcnVariant::Fcn16s, a.height, a.width, a.classes, init)?,
        Arch::Fcn32s => build_fcn(FcnVariant::Fcn32s, a.height, a.width, a.classes, init)?,
    };
    let bytes = modelfile::save(&g, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let (nodes, params) = (g.len(), g.parameter_count());
    match format {
        Format::Csv => {
            println!("model,nodes,params,bytes,size_MB");
            println!("{},{nodes},{params},{bytes},{}", csv_line([&g.name]), bytes as f64 / 1e6);
        }
        _ => println!(
            "{}: {nodes} nodes, {params} parameters, {bytes} bytes ({:.3} MB) -> {}",
            g.name,
            bytes as f64 / 1e6,
            a.out.display()
        ),
    }
    Ok(())
}

pub fn optimize(a: &OptimizeArgs, format: Format) -> Result<()> {
    let g = load(&a.input)?;
    let mut cfg = PipelineConfig::default();
    if let Some(t) = a.quant_threshold {
        cfg.quant_threshold = t;
    }
    let (out, reports) = run_pipeline_with(&g, &a.passes, &cfg)?;
    let bytes = modelfile::save(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let before = modelfile::measure(&g).total;
    match format {
        Format::Csv => {
            println!("pass,nodes_before,nodes_after,bytes_before,bytes_after,payload_before,payload_after,rewrites");
            for r in &reports {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.pass,
                    r.nodes_before,
                    r.nodes_after,
                    r.bytes_before,
                    r.bytes_after,
                    r.payload_before,
                    r.payload_after,
                    r.rewrites
                );
            }
        }
        _ => {
            for r in &reports {
                println!("{r}");
            }
            println!(
                "size {:.6} MB -> {:.6} MB (ratio {:.4}), {} -> {}",
                before as f64 / 1e6,
                bytes as f64 / 1e6,
                bytes as f64 / before as f64,
                a.input.display(),
                a.out.display()
            );
        }
    }
    Ok(())
}

pub fn estimate(a: &EstimateArgs, format: Format) -> Result<()> {
    let g = load(&a.input)?;
    let spec = match (a.height, a.width) {
        (Some(h), Some(w)) => TensorSpec::f32(vec![h, w, 3]),
        _ => model_input(&g)?,
    };
    let report = estimate_memory(&g, &spec, a.batch)?;
    match format {
        Format::Csv => print!("{}", report.to_csv()?),
        _ => print!("{report}"),
    }
    if let Some(gb) = a.budget_gb {
        if !(gb > 0.0) {
            bail!(Usage(format!("--budget-gb must be positive, got {gb}")));
        }
        let advice = recommend_batch(&report, (gb * 1e9) as usize, a.fwd_bwd_factor, a.optimizer_factor)?;
        match format {
            Format::Csv => eprintln!("{}", advice.note),
            _ => println!(
                "training: {:.1} MB per image, max batch {} ({})",
                advice.per_image_bytes as f64 / 1e6,
                advice.max_batch,
                advice.note
            ),
        }
    }
    Ok(())
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pnm" | "ppm" | "pgm"))
}

fn list_pnm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_pnm(p));
    files.sort();
    Ok(files)
}

/// Scales 8-bit pixels to [0, 1] floats at the model's input size.
pub fn preprocess(img: &Tensor, spec: &TensorSpec) -> Result<Tensor> {
    let [_, _, c] = img.hwc()?;
    if c != spec.shape[2] {
        bail!("image has {c} channels, the model expects {}", spec.shape[2]);
    }
    let resized = resize_nearest(img, spec.shape[0], spec.shape[1])?;
    let v = resized.to_f32_vec().into_iter().map(|p| p / 255.0).collect();
    Ok(Tensor::from_f32(spec.shape.clone(), v)?)
}

struct Segmenter {
    g: Graph,
    spec: TensorSpec,
    choice: Option<KernelChoice>,
    plan: Option<segforge_core::executor::MemoryPlan>,
}

impl Segmenter {
    fn label(&self, img: &Tensor) -> Result<Tensor> {
        let [h, w, _] = img.hwc()?;
        let x = preprocess(img, &self.spec)?;
        let out = match &self.plan {
            Some(plan) => {
                let name = self.g.inputs().next().map(|n| n.name.clone()).unwrap_or_default();
                execute_planned(&self.g, plan, &HashMap::from([(name, x)]), self.choice.as_ref())?
            }
            None => execute_single(&self.g, &x, self.choice.as_ref())?,
        };
        let logits = out.first();
        let [oh, ow, c] = logits.hwc()?;
        if c > 256 {
            bail!("{c} classes do not fit 8-bit label maps");
        }
        let labels: Vec<u8> = kernels::argmax(&logits.to_f32_vec(), c).into_iter().map(|v| v as u8).collect();
        let small = Tensor::from_labels(oh, ow, labels)?;
        Ok(resize_nearest(&small, h, w)?)
    }
}

pub fn run(a: &RunArgs, format: Format) -> Result<()> {
    let g = load(&a.input)?;
    let spec = model_input(&g)?;
    let choice = if a.autotune {
        Some(autotune(&g, &spec, a.repeats)?)
    } else {
        None
    };
    let plan = if a.plan { Some(plan_memory(&g, &spec)?) } else { None };
    let seg = Segmenter { g, spec, choice, plan };

    let jobs: Vec<(PathBuf, PathBuf)> = match (&a.image, &a.out_labels, &a.images, &a.out_dir) {
        (Some(img), Some(out), None, _) => vec![(img.clone(), out.clone())],
        (None, _, Some(dir), Some(out_dir)) => {
            fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            list_pnm(dir)?
                .into_iter()
                .map(|p| {
                    let out = out_dir.join(p.file_name().unwrap());
                    (p, out)
                })
                .collect()
        }
        _ => bail!(Usage("give --image with --out-labels, or --images with --out-dir".into())),
    };
    if format == Format::Csv {
        println!("image,labels,height,width,ms");
    }
    for (img_path, out_path) in jobs {
        let img = read_image_pnm(&img_path).with_context(|| format!("reading {}", img_path.display()))?;
        let t = Instant::now();
        let labels = seg.label(&img)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        write_image_pnm(&labels, &out_path).with_context(|| format!("writing {}", out_path.display()))?;
        let [h, w, _] = labels.hwc()?;
        match format {
            Format::Csv => println!(
                "{},{h},{w},{ms:.3}",
                csv_line([img_path.display().to_string(), out_path.display().to_string()])
            ),
            _ => println!("{} -> {} ({h}×{w}, {ms:.1} ms)", img_path.display(), out_path.display()),
        }
    }
    Ok(())
}

fn print_iou(kind: &str, t: &IouTable, format: Format) {
    match format {
        Format::Csv => {
            for e in &t.entries {
                println!("{kind},{},{}", csv_line([&e.name]), e.iou.map(|v| v.to_string()).unwrap_or_default());
            }
            println!("{kind},mean,{}", t.mean.map(|v| v.to_string()).unwrap_or_default());
        }
        Format::Markdown => {
            println!("| {kind} | IoU |\n|---|---|");
            for e in &t.entries {
                println!("| {} | {} |", e.name, e.iou.map(|v| format!("{v:.4}")).unwrap_or("n/a".into()));
            }
            println!("| **mean** | {} |\n", t.mean.map(|v| format!("{v:.4}")).unwrap_or("n/a".into()));
        }
        Format::Text => println!("{kind} IoU\n{t}\n"),
    }
}

pub fn eval(a: &EvalArgs, format: Format) -> Result<()> {
    let schema = match &a.schema {
        Some(p) => LabelSchema::load(p)?,
        None => LabelSchema::cityscapes(),
    };
    let gts = list_pnm(&a.gt)?;
    if gts.is_empty() {
        bail!("no label maps found in {}", a.gt.display());
    }
    let pairs: Vec<(PathBuf, PathBuf)> = gts
        .into_iter()
        .map(|gt| {
            let pred = a.pred.join(gt.file_name().unwrap());
            if pred.is_file() {
                Ok((pred, gt))
            } else {
                bail!("no prediction {} for {}", pred.display(), gt.display())
            }
        })
        .collect::<Result<_>>()?;
    let cm = pairs
        .par_iter()
        .map(|(pred, gt)| -> Result<ConfusionMatrix> {
            let mut cm = ConfusionMatrix::for_schema(&schema);
            let p = read_image_pnm(pred)?;
            let g = read_image_pnm(gt)?;
            cm.accumulate(&g, &p, &schema).with_context(|| format!("scoring {}", pred.display()))?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::for_schema(&schema),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )?;
    if format == Format::Csv {
        println!("kind,name,iou");
    } else {
        println!("{} image pairs, {} scored pixels\n", pairs.len(), cm.total());
    }
    print_iou("class", &class_iou(&cm, &schema), format);
    print_iou("category", &category_iou(&cm, &schema), format);
    Ok(())
}

pub fn bench(a: &BenchArgs, format: Format) -> Result<()> {
    let g = load(&a.input)?;
    let spec = model_input(&g)?;
    let size_mb = modelfile::model_size(&a.input)?.total_mb();
    let power_w = match (&a.power, a.power_format, a.watts) {
        (Some(path), Some(f), None) => {
            let f = match f {
                PowerFormatArg::GpuSmiCsv => PowerFormat::GpuSmiCsv,
                PowerFormatArg::InaSysfs => PowerFormat::InaSysfs,
            };
            let trace = parse_power_log(f, path)?;
            average_power(&trace, None)?
        }
        (None, None, Some(w)) if w >= 0.0 => w,
        _ => bail!(Usage("give --power with --power-format, or a non-negative --watts".into())),
    };
    let x = match &a.image {
        Some(p) => preprocess(&read_image_pnm(p)?, &spec)?,
        None => synth::random_input(&spec, 0),
    };
    let choice = if a.autotune { Some(autotune(&g, &spec, 3)?) } else { None };
    let stats = time_inference(&g, &x, a.warmup, a.iters, choice.as_ref(), a.parallel)?;
    let model = g.name.split('_').next().unwrap_or(&g.name).to_string();
    let report = BenchReport::new(model, g.name.clone(), a.passes_label.clone(), size_mb, stats, a.n_images, power_w);
    let reports = [report];
    let doc = emit_report(
        &reports,
        match format {
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        },
    )?;
    print!("{doc}");
    if format == Format::Text {
        let l = &reports[0].latency;
        println!(
            "{} iterations after {} warm-up: mean {:.3} ms, p95 {:.3} ms, output crc32 {:08x}, {}",
            l.iters,
            l.warmup,
            l.mean_ms,
            l.p95_ms,
            l.output_hash,
            if l.parallel { "parallel kernels" } else { "single thread" }
        );
    }
    if let Some(path) = &a.report {
        fs::write(path, emit_report(&reports, ReportFormat::Csv)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
