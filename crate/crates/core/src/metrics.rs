//! Confusion matrices, class and category IoU, softmax and cross-entropy.
//!
//! Pixels whose ground truth is a void class are skipped entirely. A
//! prediction of a void class still counts against the ground-truth class
//! (a false negative) but scores no void or category entry of its own.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::executor::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub category: String,
    pub void: bool,
}

/// Class list indexed by id. Ids must be exactly `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    classes: Vec<ClassInfo>,
    categories: Vec<String>,
    /// Category index per class id; `None` for void classes.
    class_category: Vec<Option<usize>>,
}

const CITYSCAPES: [(&str, &str, bool); 35] = [
    ("unlabeled", "void", true),
    ("ego vehicle", "void", true),
    ("rectification border", "void", true),
    ("out of roi", "void", true),
    ("static", "void", true),
    ("dynamic", "void", true),
    ("ground", "void", true),
    ("road", "flat", false),
    ("sidewalk", "flat", false),
    ("parking", "flat", true),
    ("rail track", "flat", true),
    ("building", "construction", false),
    ("wall", "construction", false),
    ("fence", "construction", false),
    ("guard rail", "construction", true),
    ("bridge", "construction", true),
    ("tunnel", "construction", true),
    ("pole", "object", false),
    ("polegroup", "object", true),
    ("traffic light", "object", false),
    ("traffic sign", "object", false),
    ("vegetation", "nature", false),
    ("terrain", "nature", false),
    ("sky", "sky", false),
    ("person", "human", false),
    ("rider", "human", false),
    ("car", "vehicle", false),
    ("truck", "vehicle", false),
    ("bus", "vehicle", false),
    ("caravan", "vehicle", true),
    ("trailer", "vehicle", true),
    ("train", "vehicle", false),
    ("motorcycle", "vehicle", false),
    ("bicycle", "vehicle", false),
    ("license plate", "vehicle", true),
];

impl LabelSchema {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::invalid(format!("class ids must be 0..{}, found {}", classes.len(), c.id)));
            }
        }
        if classes.is_empty() || classes.len() > 256 {
            return Err(Error::invalid(format!("schema needs 1..=256 classes, got {}", classes.len())));
        }
        let mut categories: Vec<String> = Vec::new();
        let mut class_category = Vec::with_capacity(classes.len());
        for c in &classes {
            if c.void {
                class_category.push(None);
                continue;
            }
            let idx = match categories.iter().position(|k| *k == c.category) {
                Some(i) => i,
                None => {
                    categories.push(c.category.clone());
                    categories.len() - 1
                }
            };
            class_category.push(Some(idx));
        }
        Ok(LabelSchema {
            classes,
            categories,
            class_category,
        })
    }

    /// 35 Cityscapes labels: 19 scored classes in 7 categories, the rest void.
    pub fn cityscapes() -> Self {
        let classes = CITYSCAPES
            .iter()
            .enumerate()
            .map(|(i, &(name, category, void))| ClassInfo {
                id: i as u32,
                name: name.into(),
                category: category.into(),
                void,
            })
            .collect();
        LabelSchema::new(classes).expect("built-in schema is valid")
    }

    /// Parses `id,name,category,void_flag` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut classes = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != 4 {
                return Err(Error::invalid(format!(
                    "schema record {}: expected id,name,category,void_flag, got {} fields",
                    line + 1,
                    rec.len()
                )));
            }
            let id = rec[0]
                .parse()
                .map_err(|_| Error::invalid(format!("schema record {}: bad id `{}`", line + 1, &rec[0])))?;
            let void = match rec[3].to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" => false,
                other => return Err(Error::invalid(format!("schema record {}: bad void flag `{other}`", line + 1))),
            };
            classes.push(ClassInfo {
                id,
                name: rec[1].to_string(),
                category: rec[2].to_string(),
                void,
            });
        }
        LabelSchema::new(classes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.classes
            .iter()
            .map(|c| format!("{},{},{},{}\n", c.id, c.name, c.category, u8::from(c.void)))
            .collect()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Categories that contain at least one scored class, in first-seen order.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn is_void(&self, id: usize) -> bool {
        self.class_category[id].is_none()
    }

    pub fn category_of(&self, id: usize) -> Option<usize> {
        self.class_category[id]
    }

    pub fn scored_classes(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.iter().filter(|c| !c.void)
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self::cityscapes()
    }
}

/// Counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn for_schema(schema: &LabelSchema) -> Self {
        Self::new(schema.num_classes())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, count: u64) {
        self.counts[gt * self.n + pred] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|g| self.get(g, c)).sum()
    }

    pub fn accumulate(&mut self, gt: &Tensor, pred: &Tensor, schema: &LabelSchema) -> Result<()> {
        if self.n != schema.num_classes() {
            return Err(Error::invalid(format!(
                "confusion matrix is {0}×{0} but the schema has {1} classes",
                self.n,
                schema.num_classes()
            )));
        }
        let [h, w, _] = gt.hwc()?;
        let [ph, pw, _] = pred.hwc()?;
        if (h, w) != (ph, pw) {
            return Err(Error::invalid(format!("ground truth is {h}×{w} but prediction is {ph}×{pw}")));
        }
        let g = gt.to_labels()?;
        let p = pred.to_labels()?;
        if g.len() != h * w || p.len() != h * w {
            return Err(Error::invalid("label maps must have a single channel"));
        }
        // Validate everything first so a bad map leaves the matrix untouched.
        for (i, (&a, &b)) in g.iter().zip(&p).enumerate() {
            for l in [a, b] {
                if l as usize >= self.n {
                    return Err(Error::LabelOutOfRange {
                        row: i / w,
                        col: i % w,
                        label: l as u32,
                    });
                }
            }
        }
        for (&a, &b) in g.iter().zip(&p) {
            if !schema.is_void(a as usize) {
                self.add(a as usize, b as usize, 1);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::invalid(format!("cannot merge {}×{} into {}×{}", other.n, other.n, self.n, self.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouEntry {
    pub name: String,
    /// `None` when the entry never occurs in ground truth or prediction.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouTable {
    pub entries: Vec<IouEntry>,
    /// Mean over entries with a defined IoU.
    pub mean: Option<f64>,
}

impl IouTable {
    fn from_entries(entries: Vec<IouEntry>) -> Self {
        let defined: Vec<f64> = entries.iter().filter_map(|e| e.iou).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        IouTable { entries, mean }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).and_then(|e| e.iou)
    }

    pub fn absent(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.iou.is_none()).map(|e| e.name.as_str())
    }
}

impl fmt::Display for IouTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            match e.iou {
                Some(v) => writeln!(f, "{:<16} {v:.4}", e.name)?,
                None => writeln!(f, "{:<16} n/a", e.name)?,
            }
        }
        match self.mean {
            Some(m) => write!(f, "{:<16} {m:.4}", "mean"),
            None => write!(f, "{:<16} n/a", "mean"),
        }
    }
}

fn iou(tp: u64, gt_total: u64, pred_total: u64) -> Option<f64> {
    let denom = gt_total + pred_total - tp;
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// IoU = TP / (TP + FP + FN) for every scored class.
pub fn class_iou(cm: &ConfusionMatrix, schema: &LabelSchema) -> IouTable {
    let entries = schema
        .scored_classes()
        .map(|c| {
            let i = c.id as usize;
            IouEntry {
                name: c.name.clone(),
                iou: iou(cm.get(i, i), cm.row_sum(i), cm.col_sum(i)),
            }
        })
        .collect();
    IouTable::from_entries(entries)
}

/// IoU after mapping both ground truth and prediction to categories.
pub fn category_iou(cm: &ConfusionMatrix, schema: &LabelSchema) -> IouTable {
    let k = schema.categories().len();
    // Last bucket collects predictions of void classes.
    let mut folded = ConfusionMatrix::new(k + 1);
    for g in 0..cm.size() {
        let Some(gc) = schema.category_of(g) else { continue };
        for p in 0..cm.size() {
            folded.add(gc, schema.category_of(p).unwrap_or(k), cm.get(g, p));
        }
    }
    let entries = schema
        .categories()
        .iter()
        .enumerate()
        .map(|(c, name)| IouEntry {
            name: name.clone(),
            iou: iou(folded.get(c, c), folded.row_sum(c), folded.col_sum(c)),
        })
        .collect();
    IouTable::from_entries(entries)
}

/// Per-pixel softmax over channels with max subtraction.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    let [_, w, c] = logits.hwc()?;
    let x = logits.to_f32_vec();
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        let px = i / c.max(1);
        return Err(Error::invalid(format!(
            "non-finite logit at pixel (row {}, col {}), channel {}",
            px / w.max(1),
            px % w.max(1),
            i % c.max(1)
        )));
    }
    Tensor::from_f32(logits.shape().to_vec(), kernels::softmax(&x, c))
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub scored_pixels: usize,
    /// Scored pixels whose ground-truth probability was clamped.
    pub clamped: usize,
}

/// Mean of −ln p(ground truth) over pixels with non-void ground truth.
pub fn cross_entropy_loss(probs: &Tensor, gt: &Tensor, schema: &LabelSchema) -> Result<CrossEntropy> {
    let [h, w, c] = probs.hwc()?;
    if c != schema.num_classes() {
        return Err(Error::invalid(format!("{c} probability channels for {} classes", schema.num_classes())));
    }
    let [gh, gw, _] = gt.hwc()?;
    if (gh, gw) != (h, w) {
        return Err(Error::invalid(format!("probabilities are {h}×{w} but ground truth is {gh}×{gw}")));
    }
    let labels = gt.to_labels()?;
    let p = probs.to_f32_vec();
    let (mut sum, mut scored, mut clamped) = (0.0f64, 0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= c {
            return Err(Error::LabelOutOfRange {
                row: i / w,
                col: i % w,
                label: l as u32,
            });
        }
        if schema.is_void(l) {
            continue;
        }
        let mut v = p[i * c + l] as f64;
        if v < PROB_FLOOR {
            v = PROB_FLOOR;
            clamped += 1;
        }
        sum -= v.ln();
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::invalid("no scored pixels: every ground-truth label is void"));
    }
    if clamped > 0 {
        log::warn!("{clamped} ground-truth probabilities clamped to {PROB_FLOOR}");
    }
    Ok(CrossEntropy {
        loss: sum / scored as f64,
        scored_pixels: scored,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, v: &[u8]) -> Tensor {
        Tensor::from_labels(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn cityscapes_shape() {
        let s = LabelSchema::cityscapes();
        assert_eq!(s.num_classes(), 35);
        assert_eq!(s.scored_classes().count(), 19);
        assert_eq!(
            s.categories(),
            ["flat", "construction", "object", "nature", "sky", "human", "vehicle"]
        );
        assert_eq!(LabelSchema::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn schema_parse_errors() {
        assert!(LabelSchema::parse("0,a,x,0\n2,b,x,0\n").is_err());
        assert!(LabelSchema::parse("0,a,x\n").is_err());
        assert!(LabelSchema::parse("0,a,x,maybe\n").is_err());
        let s = LabelSchema::parse("# two classes\n1, b, y, yes\n0, a, x, 0\n").unwrap();
        assert!(s.is_void(1));
        assert_eq!(s.categories(), ["x"]);
    }

    #[test]
    fn perfect_and_swapped() {
        let s = LabelSchema::cityscapes();
        let gt = labels(2, 2, &[7, 7, 26, 23]);
        let mut cm = ConfusionMatrix::for_schema(&s);
        cm.accumulate(&gt, &gt, &s).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.get(7, 7), 2);
        let t = class_iou(&cm, &s);
        assert_eq!(t.mean, Some(1.0));
        assert_eq!(t.absent().count(), 16);

        let mut cm = ConfusionMatrix::for_schema(&s);
        cm.accumulate(&labels(1, 2, &[7, 7]), &labels(1, 2, &[8, 8]), &s).unwrap();
        let t = class_iou(&cm, &s);
        assert_eq!(t.get("road"), Some(0.0));
        assert_eq!(t.get("sidewalk"), Some(0.0));
    }

    #[test]
    fn hand_built_counts() {
        let s = LabelSchema::parse("0,a,x,0\n1,b,x,0\n").unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.add(0, 0, 3);
        cm.add(1, 0, 1);
        cm.add(0, 1, 2);
        assert_eq!(class_iou(&cm, &s).get("a"), Some(0.5));
        assert_eq!(category_iou(&cm, &s).get("x"), Some(1.0));
    }

    #[test]
    fn void_ground_truth_is_skipped() {
        let s = LabelSchema::cityscapes();
        let mut cm = ConfusionMatrix::for_schema(&s);
        cm.accumulate(&labels(1, 3, &[0, 9, 34]), &labels(1, 3, &[7, 7, 7]), &s).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn same_category_confusion() {
        let s = LabelSchema::cityscapes();
        let mut cm = ConfusionMatrix::for_schema(&s);
        cm.accumulate(&labels(1, 4, &[24, 24, 25, 25]), &labels(1, 4, &[24, 25, 24, 25]), &s).unwrap();
        let c = class_iou(&cm, &s);
        assert!(c.get("person").unwrap() < 1.0);
        assert!(c.get("rider").unwrap() < 1.0);
        assert_eq!(category_iou(&cm, &s).get("human"), Some(1.0));
    }

    #[test]
    fn out_of_range_reports_pixel() {
        let s = LabelSchema::cityscapes();
        let mut cm = ConfusionMatrix::for_schema(&s);
        let err = cm.accumulate(&labels(2, 2, &[7, 7, 7, 40]), &labels(2, 2, &[7; 4]), &s).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 1, col: 1, label: 40 }));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_probs(&Tensor::from_f32(vec![1, 1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.to_f32_vec(), vec![0.5, 0.5]);
        let p = softmax_probs(&Tensor::from_f32(vec![1, 1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(p.to_f32_vec(), vec![0.5, 0.5]);
        assert!(softmax_probs(&Tensor::from_f32(vec![1, 1, 2], vec![f32::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let s = LabelSchema::cityscapes();
        let gt = labels(1, 2, &[7, 0]);
        let mut onehot = vec![0.0; 70];
        onehot[7] = 1.0;
        onehot[35] = 1.0;
        let probs = Tensor::from_f32(vec![1, 2, 35], onehot).unwrap();
        let ce = cross_entropy_loss(&probs, &gt, &s).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert_eq!(ce.scored_pixels, 1);

        let zero = Tensor::from_f32(vec![1, 2, 35], vec![0.0; 70]).unwrap();
        let ce = cross_entropy_loss(&zero, &gt, &s).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.loss - (-PROB_FLOOR.ln())).abs() < 1e-9);

        assert!(cross_entropy_loss(&zero, &labels(1, 2, &[0, 1]), &s).is_err());
    }
}
