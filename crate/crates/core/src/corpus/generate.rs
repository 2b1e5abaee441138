//! Deterministic generator for the bundled toy corpus.
//!
//! Every sample is a templated one-line function over an operation drawn
//! from a fixed pool, paired with a summary that names the operation, the
//! verb implied by the function-name prefix and the kind of argument. A small
//! tail of operations is given exact training quotas (1, 2, 5 and 10
//! occurrences) so low-frequency summary tokens exist at known counts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sample::{save_dataset, CodeSample};
use super::toy::parse_toy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Operation {
    code: &'static str,
    phrase: &'static str,
    binary: bool,
    text: bool,
    /// Relative draw weight for head operations.
    weight: u32,
}

const fn op(code: &'static str, phrase: &'static str, binary: bool, text: bool, weight: u32) -> Operation {
    Operation {
        code,
        phrase,
        binary,
        text,
        weight,
    }
}

const HEAD: &[Operation] = &[
    op("cos", "cosine", false, false, 9),
    op("sin", "sine", false, false, 9),
    op("tan", "tangent", false, false, 6),
    op("sqrt", "square root", false, false, 8),
    op("abs", "absolute value", false, false, 8),
    op("exp", "exponential", false, false, 6),
    op("log", "logarithm", false, false, 6),
    op("floor", "floor", false, false, 4),
    op("ceil", "ceiling", false, false, 4),
    op("neg", "negation", false, false, 3),
    op("square", "square", false, false, 5),
    op("cube", "cube", false, false, 3),
    op("sinh", "hyperbolic sine", false, false, 2),
    op("cosh", "hyperbolic cosine", false, false, 2),
    op("add", "sum", true, false, 9),
    op("sub", "difference", true, false, 7),
    op("mul", "product", true, false, 7),
    op("div", "quotient", true, false, 5),
    op("max", "maximum", true, false, 8),
    op("min", "minimum", true, false, 8),
    op("pow", "power", true, false, 4),
    op("mod", "remainder", true, false, 3),
    op("avg", "average", true, false, 3),
    op("upper", "uppercase form", false, true, 5),
    op("lower", "lowercase form", false, true, 5),
    op("strip", "stripped copy", false, true, 3),
    op("reverse", "reversed copy", false, true, 4),
    op("len", "length", false, true, 6),
    op("concat", "concatenation", true, true, 5),
];

/// Tail operations with exact training-split occurrence counts. Each phrase
/// word is unique to its operation.
const TAIL: &[(Operation, usize)] = &[
    (op("hypot", "hypotenuse", true, false, 0), 1),
    (op("recip", "reciprocal", false, false, 0), 1),
    (op("gcd", "divisor", true, false, 0), 2),
    (op("lcm", "multiple", true, false, 0), 2),
    (op("sigmoid", "logistic", false, false, 0), 5),
    (op("capitalize", "capitalized", false, true, 0), 5),
    (op("dist", "distance", true, false, 0), 10),
    (op("swapcase", "swapped", false, true, 0), 10),
];

const PREFIXES: &[(&str, &str)] = &[
    ("get", "returns"),
    ("compute", "computes"),
    ("calc", "calculates"),
    ("eval", "evaluates"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Template {
    Plain,
    Twice,
    Offset,
    Nested,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Instance {
    template: Template,
    op: &'static str,
    inner: Option<&'static str>,
    prefix: usize,
    camel: bool,
    args: usize,
}

struct Rendered {
    source: String,
    summary: String,
}

fn arg_names(o: &Operation, variant: usize) -> (&'static [&'static str], &'static str) {
    match (o.text, o.binary, variant % 2) {
        (true, false, 0) => (&["s"], "string"),
        (true, false, _) => (&["text"], "text"),
        (true, true, 0) => (&["s", "t"], "strings"),
        (true, true, _) => (&["left", "right"], "strings"),
        (false, false, 0) => (&["x"], "value"),
        (false, false, _) => (&["n"], "number"),
        (false, true, 0) => (&["a", "b"], "values"),
        (false, true, _) => (&["x", "y"], "numbers"),
    }
}

fn camel(parts: &[&str]) -> String {
    parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                p.to_string()
            } else {
                let mut c = p.chars();
                c.next()
                    .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
                    .unwrap_or_default()
            }
        })
        .collect()
}

fn lookup(code: &str) -> Operation {
    HEAD.iter()
        .chain(TAIL.iter().map(|(o, _)| o))
        .find(|o| o.code == code)
        .copied()
        .expect("known operation")
}

fn render(inst: &Instance) -> Rendered {
    let o = lookup(inst.op);
    let (prefix, verb) = PREFIXES[inst.prefix];
    let (args, noun) = arg_names(&o, inst.args);
    let mut name_parts = vec![prefix, o.code];
    match inst.template {
        Template::Twice => name_parts.push("twice"),
        Template::Offset => name_parts.push("shifted"),
        Template::Nested => {
            name_parts.push("of");
            name_parts.push(inst.inner.expect("nested has inner"));
        }
        Template::Plain => {}
    }
    let name = if inst.camel {
        camel(&name_parts)
    } else {
        name_parts.join("_")
    };
    let arglist = args.join(", ");
    let the_arg = if o.binary {
        format!("two {noun}")
    } else {
        format!("the {noun}")
    };
    let (params, body, summary) = match inst.template {
        Template::Plain => (
            arglist.clone(),
            format!("{}({arglist})", o.code),
            format!("{verb} the {} of {the_arg}", o.phrase),
        ),
        Template::Twice => (
            arglist.clone(),
            format!("{}({arglist}) * 2", o.code),
            format!("{verb} twice the {} of {the_arg}", o.phrase),
        ),
        Template::Offset => (
            format!("{arglist}, k"),
            format!("{}({arglist}) + k", o.code),
            format!("{verb} the {} of {the_arg} plus an offset", o.phrase),
        ),
        Template::Nested => {
            let inner = lookup(inst.inner.expect("nested has inner"));
            (
                arglist.clone(),
                format!("{}({}({arglist}))", o.code, inner.code),
                format!("{verb} the {} of the {} of {the_arg}", o.phrase, inner.phrase),
            )
        }
    };
    Rendered {
        source: format!("def {name}({params}): return {body}"),
        summary,
    }
}

fn pick_head(rng: &mut ChaCha8Rng) -> Operation {
    let total: u32 = HEAD.iter().map(|o| o.weight).sum();
    let mut r = rng.gen_range(0..total);
    for o in HEAD {
        if r < o.weight {
            return *o;
        }
        r -= o.weight;
    }
    unreachable!("weights cover range")
}

fn random_instance(rng: &mut ChaCha8Rng, o: Operation, allow_nested: bool) -> Instance {
    let template = match rng.gen_range(0..10) {
        0..=4 => Template::Plain,
        5 | 6 => Template::Twice,
        7 | 8 => Template::Offset,
        _ if allow_nested && !o.binary => Template::Nested,
        _ => Template::Plain,
    };
    let inner = (template == Template::Nested).then(|| {
        let candidates: Vec<&Operation> = HEAD
            .iter()
            .filter(|i| !i.binary && i.text == o.text && i.code != o.code)
            .collect();
        candidates.choose(rng).expect("unary head ops exist").code
    });
    Instance {
        template,
        op: o.code,
        inner,
        prefix: rng.gen_range(0..PREFIXES.len()),
        camel: rng.gen_bool(0.5),
        args: rng.gen_range(0..2),
    }
}

fn to_sample(id: String, inst: &Instance) -> CodeSample {
    let r = render(inst);
    let (code_tokens, ast) = parse_toy(&r.source).expect("generated source parses");
    CodeSample {
        id,
        code_tokens,
        ast,
        summary_tokens: r.summary.split_whitespace().map(str::to_owned).collect(),
    }
}

fn draw_unique(
    rng: &mut ChaCha8Rng,
    used: &mut HashSet<Instance>,
    mut op_for: impl FnMut(&mut ChaCha8Rng) -> Operation,
    allow_nested: bool,
) -> Result<Instance> {
    for _ in 0..10_000 {
        let o = op_for(rng);
        let inst = random_instance(rng, o, allow_nested);
        if used.insert(inst.clone()) {
            return Ok(inst);
        }
    }
    Err(Error::InvalidArgument(
        "toy corpus exhausted its distinct template instances".into(),
    ))
}

/// The three splits as in-memory samples.
pub fn toy_corpus(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<[Vec<CodeSample>; 3]> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("split sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();

    // Tail quotas first (cycled down if the split is tiny), the rest from the head.
    let mut train_insts = Vec::with_capacity(n_train);
    'quota: for (o, count) in TAIL {
        for _ in 0..*count {
            if train_insts.len() * 5 >= n_train {
                break 'quota;
            }
            train_insts.push(draw_unique(&mut rng, &mut used, |_| *o, false)?);
        }
    }
    while train_insts.len() < n_train {
        train_insts.push(draw_unique(&mut rng, &mut used, pick_head, true)?);
    }
    train_insts.shuffle(&mut rng);

    let mut held_out = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Instance>> {
        (0..n)
            .map(|_| {
                draw_unique(
                    rng,
                    &mut used,
                    |r| {
                        if r.gen_bool(0.2) {
                            TAIL.choose(r).expect("tail").0
                        } else {
                            pick_head(r)
                        }
                    },
                    true,
                )
            })
            .collect()
    };
    let val_insts = held_out(n_val, &mut rng)?;
    let test_insts = held_out(n_test, &mut rng)?;

    let build = |split: &str, insts: &[Instance]| -> Vec<CodeSample> {
        insts
            .iter()
            .enumerate()
            .map(|(i, inst)| to_sample(format!("{split}-{i:05}"), inst))
            .collect()
    };
    Ok([
        build("train", &train_insts),
        build("val", &val_insts),
        build("test", &test_insts),
    ])
}

/// Write `train.jsonl`, `val.jsonl` and `test.jsonl` under `out_dir`.
pub fn gen_toy_corpus(seed: u64, n_train: usize, n_val: usize, n_test: usize, out_dir: &Path) -> Result<()> {
    let [train, val, test] = toy_corpus(seed, n_train, n_val, n_test)?;
    fs::create_dir_all(out_dir)?;
    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        let tmp = out_dir.join(format!(".{name}.jsonl.tmp"));
        save_dataset(&tmp, split)?;
        fs::rename(&tmp, out_dir.join(format!("{name}.jsonl")))?;
    }
    Ok(())
}
