//! Synthetic group-biased classification data and activation dumps.
//!
//! Every example carries a class `y` and a confounder `a`. The confounder token
//! always sits at sequence position 1 (right after CLS) while the class-signal
//! token lands at a random position and is sometimes dropped, so the
//! confounder is the easier feature to latch onto. Class `y`'s dominant
//! confounder is `y mod A`; examples with that confounder form the majority
//! groups and all others the minority groups.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::numeric::hex;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    /// Data tokens, `seq_len - 1` of them; CLS is not included.
    pub tokens: Vec<u32>,
    pub y: u32,
    pub a: u32,
    pub group: u32,
}

impl Example {
    pub fn new(tokens: Vec<u32>, y: u32, a: u32, n_confounders: usize) -> Self {
        Self {
            tokens,
            y,
            a,
            group: group_id(y, a, n_confounders),
        }
    }
}

pub fn group_id(y: u32, a: u32, n_confounders: usize) -> u32 {
    y * n_confounders as u32 + a
}

/// The confounder that co-occurs with class `y` in the majority group.
pub fn dominant_confounder(y: u32, n_confounders: usize) -> u32 {
    y % n_confounders as u32
}

/// `(class, confounder)` pair, printed as `(y=.., a=..)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub y: u32,
    pub a: u32,
}

impl Group {
    pub fn from_id(g: usize, n_confounders: usize) -> Self {
        Self {
            y: (g / n_confounders) as u32,
            a: (g % n_confounders) as u32,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(y={}, a={})", self.y, self.a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// P(a = dominant confounder of y).
    pub rho: f64,
    /// Probability that the class-signal token is dropped.
    pub eta: f64,
    pub n_classes: usize,
    pub n_confounders: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 1000,
            n_test: 2000,
            rho: 0.95,
            eta: 0.1,
            n_classes: 2,
            n_confounders: 2,
            vocab_size: 32,
            seq_len: 16,
            seed: 0,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0.5, 1), got {}",
                self.rho
            )));
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err(Error::Config(format!(
                "eta must lie in [0, 0.5), got {}",
                self.eta
            )));
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if n < 4 {
                return Err(Error::Config(format!("{name} must be at least 4, got {n}")));
            }
        }
        if self.n_classes < 2 || self.n_confounders < 2 {
            return Err(Error::Config(
                "need at least 2 classes and 2 confounders".to_string(),
            ));
        }
        // CLS + A confounder ids + C signal ids + at least one filler id.
        let reserved = 1 + self.n_confounders + self.n_classes;
        if self.vocab_size <= reserved {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no filler ids after {reserved} reserved ids",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::Config(format!(
                "seq_len must be >= 4 to hold CLS, confounder and a signal slot, got {}",
                self.seq_len
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        let n = self.total() as f64;
        (
            self.n_train as f64 / n,
            self.n_val as f64 / n,
            self.n_test as f64 / n,
        )
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn confounder_token(&self, a: u32) -> u32 {
        1 + a
    }

    pub fn signal_token(&self, y: u32) -> u32 {
        1 + self.n_confounders as u32 + y
    }

    pub fn first_filler(&self) -> u32 {
        (1 + self.n_confounders + self.n_classes) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub examples: Vec<Example>,
    /// Example count per group id `y·A + a`.
    pub group_table: Vec<usize>,
    pub n_classes: usize,
    pub n_confounders: usize,
    pub provenance: String,
}

impl GroupedDataset {
    pub fn new(
        examples: Vec<Example>,
        n_classes: usize,
        n_confounders: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut group_table = vec![0; n_classes * n_confounders];
        for (i, ex) in examples.iter().enumerate() {
            if ex.y as usize >= n_classes || ex.a as usize >= n_confounders {
                return Err(Error::Data(format!(
                    "example {i} has (y={}, a={}) outside {n_classes} classes × {n_confounders} confounders",
                    ex.y, ex.a
                )));
            }
            if ex.group != group_id(ex.y, ex.a, n_confounders) {
                return Err(Error::Data(format!(
                    "example {i} has group {} inconsistent with (y={}, a={})",
                    ex.group, ex.y, ex.a
                )));
            }
            group_table[ex.group as usize] += 1;
        }
        Ok(Self {
            examples,
            group_table,
            n_classes,
            n_confounders,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.group_table.len()
    }

    pub fn is_majority(&self, ex: &Example) -> bool {
        ex.a == dominant_confounder(ex.y, self.n_confounders)
    }

    /// Content hash over shape metadata and every example, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_classes as u64).to_le_bytes());
        h.update((self.n_confounders as u64).to_le_bytes());
        for ex in &self.examples {
            h.update(ex.y.to_le_bytes());
            h.update(ex.a.to_le_bytes());
            h.update((ex.tokens.len() as u64).to_le_bytes());
            for t in &ex.tokens {
                h.update(t.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    fn derive(&self, examples: Vec<Example>, tag: &str) -> Self {
        Self::new(
            examples,
            self.n_classes,
            self.n_confounders,
            format!("{}:{tag}", self.provenance),
        )
        .expect("subset of a valid dataset is valid")
    }

    /// One line per example: `y a t1 t2 ... t_{T-1}`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&format!("{} {}", ex.y, ex.a));
            for t in &ex.tokens {
                out.push_str(&format!(" {t}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(
        text: &str,
        n_classes: usize,
        n_confounders: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        let mut width = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: std::result::Result<Vec<u32>, _> = line
                .split_ascii_whitespace()
                .map(str::parse::<u32>)
                .collect();
            let fields = fields.map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() < 3 {
                return Err(Error::Data(format!(
                    "line {}: expected `y a tokens...`",
                    lineno + 1
                )));
            }
            if *width.get_or_insert(fields.len()) != fields.len() {
                return Err(Error::Data(format!(
                    "line {}: inconsistent token count",
                    lineno + 1
                )));
            }
            examples.push(Example::new(
                fields[2..].to_vec(),
                fields[0],
                fields[1],
                n_confounders,
            ));
        }
        Self::new(examples, n_classes, n_confounders, provenance)
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_text(
        path: impl AsRef<Path>,
        n_classes: usize,
        n_confounders: usize,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, n_classes, n_confounders, path.display().to_string())
    }
}

/// Samples a dataset with `n_train + n_val + n_test` examples.
pub fn generate(config: &BiasConfig) -> Result<GroupedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.n_classes as u32;
    let a_count = config.n_confounders as u32;
    let len = config.seq_len - 1;
    let filler = config.first_filler()..config.vocab_size as u32;
    let mut examples = Vec::with_capacity(config.total());
    for _ in 0..config.total() {
        let y = rng.gen_range(0..c);
        let dominant = dominant_confounder(y, config.n_confounders);
        let a = if rng.gen::<f64>() < config.rho {
            dominant
        } else {
            // Uniform over the A-1 other confounders.
            let k = rng.gen_range(0..a_count - 1);
            if k >= dominant {
                k + 1
            } else {
                k
            }
        };
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(filler.clone())).collect();
        // Sequence position p sits at token index p - 1 because CLS occupies position 0.
        tokens[0] = config.confounder_token(a);
        if rng.gen::<f64>() >= config.eta {
            let pos = rng.gen_range(2..config.seq_len - 1);
            tokens[pos - 1] = config.signal_token(y);
        }
        examples.push(Example::new(tokens, y, a, config.n_confounders));
    }
    GroupedDataset::new(
        examples,
        config.n_classes,
        config.n_confounders,
        config.digest(),
    )
}

/// Shuffles with `seed` and partitions into train/val/test.
///
/// With `balanced_eval`, the test part keeps only the first `m` examples of
/// each group in shuffled order, `m` being the smallest test-group count.
pub fn split(
    dataset: &GroupedDataset,
    fractions: (f64, f64, f64),
    balanced_eval: bool,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = dataset.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| -> Vec<Example> {
        idx.iter().map(|&i| dataset.examples[i].clone()).collect()
    };
    let train = dataset.derive(pick(&order[..n_train]), "train");
    let val = dataset.derive(pick(&order[n_train..n_train + n_val]), "val");
    let mut test = dataset.derive(pick(&order[n_train + n_val..]), "test");

    if balanced_eval {
        test = balance(&test)?;
    }
    Ok((train, val, test))
}

/// Subsamples so every group keeps the same count (the smallest group's).
pub fn balance(dataset: &GroupedDataset) -> Result<GroupedDataset> {
    if let Some(g) = dataset.group_table.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "group {} is empty; cannot balance",
            Group::from_id(g, dataset.n_confounders)
        )));
    }
    let m = *dataset
        .group_table
        .iter()
        .min()
        .expect("at least one group");
    let mut taken = vec![0usize; dataset.n_groups()];
    let examples = dataset
        .examples
        .iter()
        .filter(|ex| {
            let slot = &mut taken[ex.group as usize];
            *slot += 1;
            *slot <= m
        })
        .cloned()
        .collect();
    Ok(dataset.derive(examples, "balanced"))
}

/// All examples of group `(y, a)`, order preserved.
pub fn select_group(dataset: &GroupedDataset, y: u32, a: u32) -> Result<GroupedDataset> {
    select_where(dataset, &format!("y{y}a{a}"), |ex| ex.y == y && ex.a == a)
        .map_err(|_| Error::Data(format!("group {} is empty", Group { y, a })))
}

/// Examples of class `y` whose confounder is not the dominant one.
pub fn select_minority(dataset: &GroupedDataset, y: u32) -> Result<GroupedDataset> {
    let dominant = dominant_confounder(y, dataset.n_confounders);
    select_where(dataset, &format!("y{y}minority"), |ex| {
        ex.y == y && ex.a != dominant
    })
    .map_err(|_| Error::Data(format!("class {y} has no minority examples")))
}

fn select_where(
    dataset: &GroupedDataset,
    tag: &str,
    keep: impl Fn(&Example) -> bool,
) -> Result<GroupedDataset> {
    let examples: Vec<Example> = dataset
        .examples
        .iter()
        .filter(|e| keep(e))
        .cloned()
        .collect();
    if examples.is_empty() {
        return Err(Error::Data(format!("selection {tag} is empty")));
    }
    Ok(dataset.derive(examples, tag))
}

const DUMP_MAGIC: &[u8; 4] = b"STVD";
const DUMP_VERSION: u32 = 1;

/// Residual-stream activations captured at `resid_pre` from some model,
/// with the class and confounder labels of each captured input.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    /// `[N, L, T, d_model]`
    pub dims: [usize; 4],
    pub activations: Vec<f32>,
    pub labels: Vec<u32>,
    pub confounders: Vec<u32>,
}

impl ActivationDump {
    pub fn new(
        dims: [usize; 4],
        activations: Vec<f32>,
        labels: Vec<u32>,
        confounders: Vec<u32>,
    ) -> Result<Self> {
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape("dump dimensions overflow".to_string()))?;
        if activations.len() != expected {
            return Err(Error::Shape(format!(
                "dump declares {expected} values, got {}",
                activations.len()
            )));
        }
        if labels.len() != dims[0] || confounders.len() != dims[0] {
            return Err(Error::Shape(format!(
                "dump has N={} but {} labels and {} confounders",
                dims[0],
                labels.len(),
                confounders.len()
            )));
        }
        if activations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                hook: "dump".to_string(),
                detail: "non-finite activation".to_string(),
            });
        }
        Ok(Self {
            dims,
            activations,
            labels,
            confounders,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.dims[0]
    }

    /// `[L × T × d_model]` block of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.activations[i * stride..(i + 1) * stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DUMP_MAGIC);
        w.u32(DUMP_VERSION);
        w.tensor(&self.dims, &self.activations);
        w.u32_array(&self.labels);
        w.u32_array(&self.confounders);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DUMP_MAGIC)?;
        r.version(DUMP_VERSION)?;
        let at = r.offset();
        let (dims, activations) = r.tensor("activations")?;
        let dims: [usize; 4] = dims.try_into().map_err(|d: Vec<usize>| {
            Error::format(
                at,
                format!("activation tensor must be 4-D, got {}-D", d.len()),
            )
        })?;
        let at = r.offset();
        let labels = r.u32_array("labels")?;
        let confounders = r.u32_array("confounders")?;
        r.expect_end()?;
        if labels.len() != dims[0] || confounders.len() != dims[0] {
            return Err(Error::format(
                at,
                format!(
                    "N={} but {} labels and {} confounders",
                    dims[0],
                    labels.len(),
                    confounders.len()
                ),
            ));
        }
        Ok(Self {
            dims,
            activations,
            labels,
            confounders,
        })
    }
}

pub fn export_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dump.to_bytes())?;
    Ok(())
}

pub fn import_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    ActivationDump::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BiasConfig {
        BiasConfig {
            n_train: 800,
            n_val: 100,
            n_test: 100,
            seed,
            ..BiasConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn token_layout() {
        let cfg = small(1);
        let ds = generate(&cfg).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.tokens.len(), cfg.seq_len - 1);
            assert_eq!(ex.tokens[0], 1 + ex.a);
            let signal = cfg.signal_token(ex.y);
            let hits: Vec<usize> = (0..ex.tokens.len())
                .filter(|&i| ex.tokens[i] == signal)
                .collect();
            assert!(hits.len() <= 1);
            // sequence positions [2, T-1) are token indices [1, T-2)
            assert!(hits.iter().all(|&i| (1..cfg.seq_len - 2).contains(&i)));
            assert!(ex
                .tokens
                .iter()
                .all(|&t| t >= 1 && (t as usize) < cfg.vocab_size));
        }
    }

    #[test]
    fn rejects_tiny_vocab_and_low_rho() {
        let cfg = BiasConfig {
            vocab_size: 5,
            ..small(0)
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = BiasConfig {
            rho: 0.4,
            ..small(0)
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unbiased_coin_at_half_rho() {
        let cfg = BiasConfig {
            rho: 0.5,
            ..small(11)
        };
        let ds = generate(&cfg).unwrap();
        let n = ds.len() as f64;
        let agree = ds.examples.iter().filter(|e| ds.is_majority(e)).count() as f64;
        assert!((agree - n / 2.0).abs() < 4.0 * n.sqrt());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate(&small(5)).unwrap();
        let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), false, 9).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let mut all: Vec<Example> = tr
            .examples
            .iter()
            .chain(&va.examples)
            .chain(&te.examples)
            .cloned()
            .collect();
        let mut orig = ds.examples.clone();
        let key = |e: &Example| (e.y, e.a, e.tokens.clone());
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = generate(&small(5)).unwrap();
        assert!(split(&ds, (0.8, 0.1, 0.2), false, 0).is_err());
        assert!(split(&ds, (1.0, 0.0, 0.0), false, 0).is_err());
    }

    #[test]
    fn balanced_test_partition() {
        let mut examples = Vec::new();
        for (g, count) in [(0u32, 50usize), (1, 20), (2, 31), (3, 70)] {
            for i in 0..count {
                examples.push(Example::new(vec![5, i as u32 % 20 + 7], g / 2, g % 2, 2));
            }
        }
        let ds = GroupedDataset::new(examples, 2, 2, "fixture").unwrap();
        let b = balance(&ds).unwrap();
        assert_eq!(b.len(), 80);
        assert_eq!(b.group_table, vec![20; 4]);
    }

    #[test]
    fn balance_names_empty_group() {
        let examples = vec![
            Example::new(vec![1], 0, 0, 2),
            Example::new(vec![1], 1, 1, 2),
        ];
        let ds = GroupedDataset::new(examples, 2, 2, "fixture").unwrap();
        let err = balance(&ds).unwrap_err().to_string();
        assert!(err.contains("(y=0, a=1)"), "{err}");
    }

    #[test]
    fn select_group_contract() {
        let ds = generate(&small(2)).unwrap();
        let mut total = 0;
        for y in 0..2 {
            for a in 0..2 {
                let s = select_group(&ds, y, a).unwrap();
                assert!(s.examples.iter().all(|e| e.y == y && e.a == a));
                assert_eq!(s.len(), ds.group_table[(y * 2 + a) as usize]);
                assert_eq!(select_group(&s, y, a).unwrap().examples, s.examples);
                total += s.len();
            }
        }
        assert_eq!(total, ds.len());
        let empty = GroupedDataset::new(vec![Example::new(vec![1], 0, 0, 2)], 2, 2, "x").unwrap();
        assert!(matches!(select_group(&empty, 1, 1), Err(Error::Data(_))));
    }

    #[test]
    fn text_round_trip() {
        let ds = generate(&small(8)).unwrap();
        let back = GroupedDataset::from_text(&ds.to_text(), 2, 2, ds.provenance.clone()).unwrap();
        assert_eq!(back, ds);
        assert!(GroupedDataset::from_text("0 0 x 1", 2, 2, "bad").is_err());
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let dump = ActivationDump::new(
            [2, 1, 2, 2],
            vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -7.25],
            vec![0, 1],
            vec![1, 1],
        )
        .unwrap();
        let bytes = dump.to_bytes();
        assert_eq!(ActivationDump::from_bytes(&bytes).unwrap(), dump);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        match ActivationDump::from_bytes(&bad).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e}"),
        }

        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 30);
        assert!(matches!(
            ActivationDump::from_bytes(&bad),
            Err(Error::Format { .. })
        ));

        let mut bad = bytes;
        bad[4] = 2; // version
        assert!(matches!(
            ActivationDump::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
