use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge_core::metrics::{
    category_iou, class_iou, cross_entropy_loss, softmax_probs, ConfusionMatrix, IouTable, LabelSchema,
};
use segforge_core::tensor::Tensor;

/// Per-pixel TP/FP/FN tally straight from the label pairs, keyed by an
/// arbitrary relabeling. `None` from `relabel` marks a pixel as unscored
/// (ground truth) or as a miss that belongs to no key (prediction).
fn tally<K: Ord + Clone>(
    pairs: &[(Vec<u8>, Vec<u8>)],
    relabel: impl Fn(u8) -> Option<K>,
) -> BTreeMap<K, (u64, u64, u64)> {
    let mut t: BTreeMap<K, (u64, u64, u64)> = BTreeMap::new();
    for (gt, pred) in pairs {
        for (&g, &p) in gt.iter().zip(pred) {
            let Some(gk) = relabel(g) else { continue };
            let pk = relabel(p);
            if pk.as_ref() == Some(&gk) {
                t.entry(gk).or_default().0 += 1;
            } else {
                t.entry(gk).or_default().2 += 1;
                if let Some(pk) = pk {
                    t.entry(pk).or_default().1 += 1;
                }
            }
        }
    }
    t
}

fn oracle_iou(t: &BTreeMap<String, (u64, u64, u64)>, name: &str) -> Option<f64> {
    t.get(name)
        .filter(|(tp, fp, fnn)| tp + fp + fnn > 0)
        .map(|(tp, fp, fnn)| *tp as f64 / (tp + fp + fnn) as f64)
}

fn check(table: &IouTable, oracle: &BTreeMap<String, (u64, u64, u64)>) {
    let mut defined = Vec::new();
    for e in &table.entries {
        let want = oracle_iou(oracle, &e.name);
        assert_eq!(e.iou, want, "{}", e.name);
        defined.extend(want);
    }
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    assert_eq!(table.mean, mean);
}

fn random_pairs(seed: u64, n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..35)).collect();
            // Mostly-correct predictions so IoUs are spread over [0, 1].
            let pred = gt
                .iter()
                .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..35) })
                .collect();
            (gt, pred)
        })
        .collect()
}

fn accumulate(schema: &LabelSchema, pairs: &[(Vec<u8>, Vec<u8>)]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::for_schema(schema);
    for (g, p) in pairs {
        let gt = Tensor::from_labels(8, 8, g.clone()).unwrap();
        let pred = Tensor::from_labels(8, 8, p.clone()).unwrap();
        cm.accumulate(&gt, &pred, schema).unwrap();
    }
    cm
}

#[test]
fn iou_matches_pixel_tally() {
    let schema = LabelSchema::cityscapes();
    let names: Vec<String> = schema.classes().iter().map(|c| c.name.clone()).collect();
    let voids: Vec<bool> = schema.classes().iter().map(|c| c.void).collect();
    let cats: Vec<String> = schema.classes().iter().map(|c| c.category.clone()).collect();
    for seed in 0..200 {
        let pairs = random_pairs(seed, 1);
        let cm = accumulate(&schema, &pairs);
        let by_class = tally(&pairs, |l| (!voids[l as usize]).then(|| names[l as usize].clone()));
        check(&class_iou(&cm, &schema), &by_class);
        let by_cat = tally(&pairs, |l| (!voids[l as usize]).then(|| cats[l as usize].clone()));
        check(&category_iou(&cm, &schema), &by_cat);
        assert_eq!(category_iou(&cm, &schema).entries.len(), 7);
    }
}

#[test]
fn accumulation_is_additive() {
    let schema = LabelSchema::cityscapes();
    let pairs = random_pairs(99, 6);
    let whole = accumulate(&schema, &pairs);
    let mut a = accumulate(&schema, &pairs[..2]);
    let b = accumulate(&schema, &pairs[2..]);
    a.merge(&b).unwrap();
    assert_eq!(a, whole);
    let scored: usize = pairs.iter().flat_map(|(g, _)| g).filter(|&&g| !schema.is_void(g as usize)).count();
    assert_eq!(whole.total(), scored as u64);
}

#[test]
fn uniform_probabilities_give_ln_classes() {
    let schema = LabelSchema::cityscapes();
    let probs = softmax_probs(&Tensor::zeros(vec![4, 4, 35])).unwrap();
    let gt = Tensor::from_labels(4, 4, (0..16).map(|i| 7 + i as u8).collect()).unwrap();
    let ce = cross_entropy_loss(&probs, &gt, &schema).unwrap();
    assert!((ce.loss - 35f64.ln()).abs() <= 1e-4);
    assert!((ce.loss - 3.5553).abs() <= 1e-4);
}

#[test]
fn cross_entropy_matches_direct_sum() {
    let schema = LabelSchema::cityscapes();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let logits: Vec<f32> = (0..16 * 35).map(|_| rng.random_range(-4.0..4.0)).collect();
        let probs = softmax_probs(&Tensor::from_f32(vec![4, 4, 35], logits).unwrap()).unwrap();
        let labels: Vec<u8> = (0..16).map(|_| rng.random_range(0..35)).collect();
        let p = probs.to_f32_vec();
        let scored: Vec<usize> = (0..16).filter(|&i| !schema.is_void(labels[i] as usize)).collect();
        if scored.is_empty() {
            continue;
        }
        let want = -scored.iter().map(|&i| (p[i * 35 + labels[i] as usize] as f64).ln()).sum::<f64>() / scored.len() as f64;
        let got = cross_entropy_loss(&probs, &Tensor::from_labels(4, 4, labels).unwrap(), &schema).unwrap();
        assert!((got.loss - want).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn iou_in_unit_interval_and_permutation_equivariant(
        gt in proptest::collection::vec(0u8..4, 16),
        pred in proptest::collection::vec(0u8..4, 16),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let text = |order: &[u8]| -> String {
            (0..4).map(|i| format!("{i},c{},k{},0\n", order[i], order[i] % 2)).collect()
        };
        let base = LabelSchema::parse(&text(&[0, 1, 2, 3])).unwrap();
        let mut cm = ConfusionMatrix::for_schema(&base);
        cm.accumulate(&Tensor::from_labels(4, 4, gt.clone()).unwrap(), &Tensor::from_labels(4, 4, pred.clone()).unwrap(), &base).unwrap();
        let t = class_iou(&cm, &base);
        for e in &t.entries {
            if let Some(v) = e.iou { prop_assert!((0.0..=1.0).contains(&v)); }
        }
        // Renumber ids by `perm`, keeping names attached to the original classes.
        let mut inverse = [0u8; 4];
        for (i, &p) in perm.iter().enumerate() { inverse[p as usize] = i as u8; }
        let permuted = LabelSchema::parse(&text(&inverse)).unwrap();
        let remap = |v: &Vec<u8>| v.iter().map(|&l| perm[l as usize]).collect::<Vec<u8>>();
        let mut cm2 = ConfusionMatrix::for_schema(&permuted);
        cm2.accumulate(&Tensor::from_labels(4, 4, remap(&gt)).unwrap(), &Tensor::from_labels(4, 4, remap(&pred)).unwrap(), &permuted).unwrap();
        let t2 = class_iou(&cm2, &permuted);
        for e in &t.entries {
            prop_assert_eq!(e.iou, t2.entries.iter().find(|x| x.name == e.name).unwrap().iou);
        }
    }
}
