//! Line-oriented dataset files and the planted-rule synthetic generator.
//!
//! File grammar (UTF-8, one record per line):
//!
//! ```text
//! schema M=2 F=1 d_irrelevant cards=5,7 lens=4 vocabs=9 tasks=2
//! user=u17|cat=3,1|seq1=4,9|labels=1,0|mask=1,1
//! ```
//!
//! Indices are 1-based; an empty sequence is written as `seq1=`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{DataSchema, Example};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn join(xs: impl IntoIterator<Item = impl ToString>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn format_header(schema: &DataSchema) -> String {
    format!(
        "schema M={} F={} d_irrelevant cards={} lens={} vocabs={} tasks={}",
        schema.num_fields(),
        schema.num_behaviors(),
        join(&schema.cards),
        join(&schema.lens),
        join(&schema.vocabs),
        schema.tasks
    )
}

pub fn format_example(ex: &Example) -> String {
    let mut s = format!("user={}|cat={}", ex.user_id, join(&ex.categorical));
    for (a, items) in ex.sequences.iter().enumerate() {
        s.push_str(&format!("|seq{}={}", a + 1, join(items)));
    }
    s.push_str(&format!(
        "|labels={}|mask={}",
        join(&ex.labels),
        join(ex.label_mask.iter().map(|&m| m as u8))
    ));
    s
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{t}` is not a non-negative integer"))
        })
        .collect()
}

pub fn parse_header(line: &str) -> std::result::Result<DataSchema, String> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some("schema") {
        return Err("header must start with `schema`".into());
    }
    let (mut m, mut f) = (None, None);
    let (mut cards, mut lens, mut vocabs, mut tasks) = (None, None, None, None);
    let mut marker = false;
    for tok in toks {
        if tok == "d_irrelevant" {
            marker = true;
            continue;
        }
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("malformed header token `{tok}`"))?;
        let one = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| format!("`{k}` expects an integer, got `{v}`"))
        };
        match k {
            "M" => m = Some(one(v)?),
            "F" => f = Some(one(v)?),
            "cards" => cards = Some(parse_list(v)?),
            "lens" => lens = Some(parse_list(v)?),
            "vocabs" => vocabs = Some(parse_list(v)?),
            "tasks" => tasks = Some(one(v)?),
            _ => return Err(format!("unknown header key `{k}`")),
        }
    }
    if !marker {
        return Err("header is missing the `d_irrelevant` marker".into());
    }
    let need = |name: &str| format!("header is missing `{name}`");
    let schema = DataSchema {
        cards: cards.ok_or_else(|| need("cards"))?,
        lens: lens.ok_or_else(|| need("lens"))?,
        vocabs: vocabs.ok_or_else(|| need("vocabs"))?,
        tasks: tasks.ok_or_else(|| need("tasks"))?,
    };
    let m = m.ok_or_else(|| need("M"))?;
    let f = f.ok_or_else(|| need("F"))?;
    if m != schema.num_fields() {
        return Err(format!("M={m} but {} cardinalities", schema.num_fields()));
    }
    if f != schema.lens.len() || f != schema.vocabs.len() {
        return Err(format!("F={f} disagrees with lens/vocabs"));
    }
    Ok(schema)
}

/// Parses one body record. Only syntax is checked here; range checks are
/// [`Example::validate`].
pub fn parse_example(line: &str, schema: &DataSchema) -> std::result::Result<Example, String> {
    let fields: Vec<&str> = line.split('|').collect();
    let expect = 4 + schema.num_behaviors();
    if fields.len() != expect {
        return Err(format!(
            "expected {expect} `|`-separated fields, found {}",
            fields.len()
        ));
    }
    let value = |i: usize, key: &str| -> std::result::Result<&str, String> {
        let (k, v) = fields[i]
            .split_once('=')
            .ok_or_else(|| format!("field `{}` lacks `=`", fields[i]))?;
        if k != key {
            return Err(format!("expected key `{key}`, found `{k}`"));
        }
        Ok(v)
    };
    let user_id = value(0, "user")?.to_string();
    if user_id.is_empty() {
        return Err("empty user id".into());
    }
    let categorical = parse_list(value(1, "cat")?)?;
    let sequences = (0..schema.num_behaviors())
        .map(|a| parse_list(value(2 + a, &format!("seq{}", a + 1))?))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels = parse_list(value(expect - 2, "labels")?)?
        .into_iter()
        .map(|l| u8::try_from(l).map_err(|_| format!("label {l} is not 0 or 1")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let label_mask = parse_list(value(expect - 1, "mask")?)?
        .into_iter()
        .map(|m| match m {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("mask entry {m} is not 0 or 1")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Example {
        user_id,
        categorical,
        sequences,
        labels,
        label_mask,
    })
}

/// Streaming reader over a dataset file's body.
pub struct DatasetReader<R> {
    path: String,
    schema: DataSchema,
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R, path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(&path, e))?,
            None => {
                return Err(Error::Parse {
                    path,
                    line: 1,
                    msg: "empty file, expected a schema header".into(),
                })
            }
        };
        let schema = parse_header(header.trim_end()).map_err(|msg| Error::Parse {
            path: path.clone(),
            line: 1,
            msg,
        })?;
        schema.validate().map_err(|e| Error::Record {
            path: path.clone(),
            line: 1,
            source: Box::new(e),
        })?;
        Ok(DatasetReader {
            path,
            schema,
            lines,
            line_no: 1,
        })
    }

    pub fn schema(&self) -> &DataSchema {
        &self.schema
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Result<Example>> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let ex = match parse_example(line, &self.schema) {
                Ok(ex) => ex,
                Err(msg) => {
                    return Some(Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line_no,
                        msg,
                    }))
                }
            };
            return Some(
                ex.validate(&self.schema)
                    .map(|_| ex)
                    .map_err(|e| Error::Record {
                        path: self.path.clone(),
                        line: self.line_no,
                        source: Box::new(e),
                    }),
            );
        }
    }
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetReader::new(BufReader::new(f), path.display().to_string())
}

/// Reads a whole dataset file into memory.
pub fn read_dataset(path: &Path) -> Result<(DataSchema, Vec<Example>)> {
    let reader = open_dataset(path)?;
    let schema = reader.schema().clone();
    let examples = reader.collect::<Result<Vec<_>>>()?;
    Ok((schema, examples))
}

pub fn write_dataset_to<W: Write>(
    mut w: W,
    schema: &DataSchema,
    examples: &[Example],
) -> std::io::Result<()> {
    writeln!(w, "{}", format_header(schema))?;
    for ex in examples {
        writeln!(w, "{}", format_example(ex))?;
    }
    w.flush()
}

pub fn write_dataset(path: &Path, schema: &DataSchema, examples: &[Example]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(BufWriter::new(f), schema, examples).map_err(|e| Error::io(path, e))
}

/// Parameters of the planted-rule generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub schema: DataSchema,
    /// Independent label-flip probability, in [0, 0.5).
    pub noise_rate: f64,
    /// Example counts for train, val and test.
    pub examples: [usize; 3],
    /// Number of distinct user ids examples are spread over.
    pub users: usize,
    /// Fraction of a rule field's values that satisfy the categorical half.
    pub cat_subset_frac: f64,
    /// Fraction of a rule behavior's vocabulary that satisfies the sequence half.
    pub item_subset_frac: f64,
}

impl SyntheticSpec {
    pub fn new(schema: DataSchema) -> Self {
        SyntheticSpec {
            schema,
            noise_rate: 0.05,
            examples: [20_000, 5_000, 5_000],
            users: 500,
            cat_subset_frac: 0.7,
            item_subset_frac: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let s = &self.schema;
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate must be in [0, 0.5), got {}",
                self.noise_rate
            )));
        }
        for (name, f) in [
            ("cat_subset_frac", self.cat_subset_frac),
            ("item_subset_frac", self.item_subset_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        if self.users == 0 {
            return Err(Error::Config("users must be >= 1".into()));
        }
        if s.num_fields() < s.tasks {
            return Err(Error::Schema(format!(
                "{} tasks need {} distinct categorical rule fields, schema has {}",
                s.tasks,
                s.tasks,
                s.num_fields()
            )));
        }
        if s.cards[..s.tasks].iter().any(|&c| c < 2) || s.vocabs.iter().any(|&v| v < 2) {
            return Err(Error::Schema(
                "rule fields and vocabularies need at least 2 values to host a proper subset"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// The planted rule of one task: clean label is 1 iff the categorical field
/// takes a value in `values` and behavior `behavior` contains an item in
/// `items`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRule {
    /// 0-based categorical field.
    pub field: usize,
    /// 0-based behavior.
    pub behavior: usize,
    /// Membership over 1-based values (index 0 unused).
    pub values: Vec<bool>,
    pub items: Vec<bool>,
}

impl TaskRule {
    pub fn eval(&self, ex: &Example) -> bool {
        self.values[ex.categorical[self.field]]
            && ex.sequences[self.behavior].iter().any(|&i| self.items[i])
    }
}

/// Per-task analytic summary of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    /// P(clean label = 1).
    pub base_rate: f64,
    /// P(observed label = 1).
    pub observed_rate: f64,
    /// Best achievable AUC against the noisy labels.
    pub ceiling: f64,
}

fn subset(rng: &mut ChaCha8Rng, n: usize, frac: f64) -> Vec<bool> {
    let k = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let mut member = vec![false; n + 1];
    for i in sample(rng, n, k) {
        member[i + 1] = true;
    }
    member
}

/// Rules for every task. Task i reads field i and behavior i mod F.
pub fn plant_rules(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TaskRule>> {
    spec.validate()?;
    let s = &spec.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    Ok((0..s.tasks)
        .map(|i| {
            let field = i;
            let behavior = i % s.num_behaviors();
            TaskRule {
                field,
                behavior,
                values: subset(&mut rng, s.cards[field], spec.cat_subset_frac),
                items: subset(&mut rng, s.vocabs[behavior], spec.item_subset_frac),
            }
        })
        .collect())
}

/// AUC of the rule-evaluating classifier against labels flipped with
/// probability `r`, given clean positive rate `pi`. The clean rule is
/// Bayes-optimal, so this is the ceiling.
pub fn noisy_ceiling(pi: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    // a: share of observed positives that are clean positives;
    // b: share of observed negatives that are clean positives.
    let a = pi * (1.0 - r) / (pi * (1.0 - r) + (1.0 - pi) * r);
    let b = pi * r / (pi * r + (1.0 - pi) * (1.0 - r));
    0.5 + 0.5 * (a - b)
}

pub fn task_stats(spec: &SyntheticSpec, rules: &[TaskRule]) -> Vec<TaskStats> {
    rules
        .iter()
        .map(|rule| {
            let card = spec.schema.cards[rule.field] as f64;
            let p_cat = rule.values.iter().filter(|&&m| m).count() as f64 / card;
            let n = spec.schema.lens[rule.behavior];
            let vocab = spec.schema.vocabs[rule.behavior] as f64;
            let miss = 1.0 - rule.items.iter().filter(|&&m| m).count() as f64 / vocab;
            // Length is uniform on 0..=n.
            let none = (0..=n).map(|l| miss.powi(l as i32)).sum::<f64>() / (n + 1) as f64;
            let pi = p_cat * (1.0 - none);
            let r = spec.noise_rate;
            TaskStats {
                base_rate: pi,
                observed_rate: pi * (1.0 - r) + (1.0 - pi) * r,
                ceiling: noisy_ceiling(pi, r),
            }
        })
        .collect()
}

fn sample_example(spec: &SyntheticSpec, rules: &[TaskRule], rng: &mut ChaCha8Rng) -> Example {
    let s = &spec.schema;
    let user_id = format!("u{}", rng.gen_range(0..spec.users));
    let categorical = s.cards.iter().map(|&c| rng.gen_range(1..=c)).collect();
    let sequences = s
        .lens
        .iter()
        .zip(&s.vocabs)
        .map(|(&n, &v)| {
            let len = rng.gen_range(0..=n);
            (0..len).map(|_| rng.gen_range(1..=v)).collect()
        })
        .collect();
    let mut ex = Example {
        user_id,
        categorical,
        sequences,
        labels: Vec::with_capacity(rules.len()),
        label_mask: vec![true; rules.len()],
    };
    for rule in rules {
        let clean = rule.eval(&ex);
        let flip = rng.gen_bool(spec.noise_rate);
        ex.labels.push((clean != flip) as u8);
    }
    ex
}

/// Generated splits plus the rule set and analytic statistics.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub seed: u64,
    pub rules: Vec<TaskRule>,
    pub stats: Vec<TaskStats>,
    /// train, val, test.
    pub splits: [Vec<Example>; 3],
}

/// Deterministic in `seed`. Rules and each split draw from separate ChaCha
/// streams of the same key, so splits never share random state.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    let rules = plant_rules(spec, seed)?;
    let stats = task_stats(spec, &rules);
    let splits = std::array::from_fn(|k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + k as u64);
        (0..spec.examples[k])
            .map(|_| sample_example(spec, &rules, &mut rng))
            .collect()
    });
    Ok(SyntheticData {
        seed,
        rules,
        stats,
        splits,
    })
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.txt"))
}

pub fn format_manifest(spec: &SyntheticSpec, data: &SyntheticData) -> String {
    let mut s = format!(
        "# seed={} noise_rate={} examples={}\ntask\tfield\tbehavior\tbase_rate\tobserved_rate\tceiling\n",
        data.seed,
        spec.noise_rate,
        join(spec.examples)
    );
    for (i, (rule, st)) in data.rules.iter().zip(&data.stats).enumerate() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            i + 1,
            rule.field + 1,
            rule.behavior + 1,
            st.base_rate,
            st.observed_rate,
            st.ceiling
        ));
    }
    s
}

/// Writes `train.txt`, `val.txt`, `test.txt` and `manifest.tsv` into `dir`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, examples) in SPLITS.iter().zip(&data.splits) {
        write_dataset(&split_path(dir, split), &spec.schema, examples)?;
    }
    let manifest = dir.join("manifest.tsv");
    std::fs::write(&manifest, format_manifest(spec, data)).map_err(|e| Error::io(&manifest, e))
}
