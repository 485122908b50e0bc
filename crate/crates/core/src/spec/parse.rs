use std::collections::BTreeMap;

use super::expr::{arg, as_count, as_num, check_args, parse_expr, Expr};
use super::{
    is_absent, Binding, GridSpec, ModelSpec, ParseError, SourceLine, SourceLines, Term, OPTIONAL_SECTIONS,
    REQUIRED_SECTIONS,
};
use crate::basis::BasisSpec;
use crate::datamodel::{DataModelSpec, SourceTerms};
use crate::error::{Result, TmmpError};
use crate::hierarchy::{EstimationStrategy, Family, HierarchyScale, HierarchySpec, MultiplicativeSpec, MultiplierScale, Prior};
use crate::kernels::KernelTemplate;
use crate::params::ParamExpr;
use crate::process::{ComponentConfig, Link, ProjectionOptions, SmootherTemplate};
use crate::smoothing::{ConstraintExpr, IndexExpr};

#[derive(Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

#[derive(Debug)]
struct Section {
    name: &'static str,
    line: usize,
    absent: bool,
    entries: Vec<Entry>,
}

#[derive(Default)]
struct Errors(Vec<ParseError>);

impl Errors {
    fn push(&mut self, line: usize, message: impl Into<String>) {
        self.0.push(ParseError {
            line,
            message: message.into(),
        });
    }
}

fn canonical_section(name: &str) -> Option<&'static str> {
    REQUIRED_SECTIONS
        .iter()
        .chain(OPTIONAL_SECTIONS.iter())
        .find(|s| s.eq_ignore_ascii_case(name.trim()))
        .copied()
}

fn split_sections(text: &str, errors: &mut Errors) -> Vec<Section> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if s.starts_with('[') {
            let Some(inner) = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')) else {
                errors.push(line, format!("malformed section header '{s}'"));
                continue;
            };
            match canonical_section(inner) {
                Some(name) if sections.iter().any(|x| x.name == name) => {
                    errors.push(line, format!("section [{name}] appears more than once"));
                }
                Some(name) => sections.push(Section {
                    name,
                    line,
                    absent: false,
                    entries: Vec::new(),
                }),
                None => errors.push(line, format!("unknown section [{}]", inner.trim())),
            }
            continue;
        }
        let Some(current) = sections.last_mut() else {
            errors.push(line, "content before the first section header");
            continue;
        };
        if is_absent(s) {
            if !current.entries.is_empty() {
                errors.push(line, format!("section [{}] is marked absent but has entries", current.name));
            }
            current.absent = true;
            continue;
        }
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                if current.absent {
                    errors.push(line, format!("section [{}] is marked absent but has entries", current.name));
                }
                current.entries.push(Entry {
                    key: k.trim().to_string(),
                    value: v.trim().to_string(),
                    line,
                });
            }
            _ => errors.push(line, format!("expected 'key = value', found '{s}'")),
        }
    }
    sections
}

/// Keyed access to a section's entries that reports duplicates and leftovers.
struct Fields<'a> {
    section: &'a Section,
    used: Vec<bool>,
}

impl<'a> Fields<'a> {
    fn new(section: &'a Section, errors: &mut Errors) -> Self {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &section.entries {
            if let Some(first) = seen.insert(&e.key, e.line) {
                errors.push(
                    e.line,
                    format!("key '{}' repeats the one on line {first} in [{}]", e.key, section.name),
                );
            }
        }
        Fields {
            section,
            used: vec![false; section.entries.len()],
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a Entry> {
        let i = self.section.entries.iter().position(|e| e.key == key)?;
        self.used[i] = true;
        Some(&self.section.entries[i])
    }

    fn require(&mut self, key: &str, errors: &mut Errors) -> Option<&'a Entry> {
        let e = self.take(key);
        if e.is_none() {
            errors.push(
                self.section.line,
                format!("section [{}] is missing key '{key}'", self.section.name),
            );
        }
        e
    }

    fn rest(&mut self) -> Vec<&'a Entry> {
        let mut out = Vec::new();
        for (i, e) in self.section.entries.iter().enumerate() {
            if !self.used[i] {
                self.used[i] = true;
                out.push(e);
            }
        }
        out
    }

    fn finish(mut self, errors: &mut Errors) {
        let name = self.section.name;
        for e in self.rest() {
            errors.push(e.line, format!("unknown key '{}' in [{name}]", e.key));
        }
    }
}

fn record(lines: &mut SourceLines, section: &str, e: &Entry) {
    lines.0.insert(format!("{section}/{}", e.key), e.line);
}

fn optional_text(e: Option<&Entry>) -> Option<String> {
    e.filter(|e| !is_absent(&e.value)).map(|e| e.value.clone())
}

fn name_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

fn expr_at(e: &Entry, errors: &mut Errors) -> Option<Expr> {
    match parse_expr(&e.value) {
        Ok(x) => Some(x),
        Err(m) => {
            errors.push(e.line, format!("{}: {m}", e.key));
            None
        }
    }
}

fn num_at(e: &Entry, errors: &mut Errors) -> Option<f64> {
    match e.value.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => {
            errors.push(e.line, format!("{} must be a finite number, found '{}'", e.key, e.value));
            None
        }
    }
}

fn parse_formula(s: &str) -> std::result::Result<Vec<Term>, String> {
    let rhs = s.split_once('=').map(|(_, r)| r).unwrap_or(s);
    let mut terms = Vec::new();
    for part in rhs.split('+') {
        let t = match part.trim() {
            "g2" => Term::Covariate,
            "g3" => Term::Systematic,
            "a" => Term::Offset,
            "eps" | "epsilon" => Term::Smoothing,
            "" => return Err("empty term in formula".into()),
            other => return Err(format!("unknown formula term '{other}' (expected g2, g3, a, eps)")),
        };
        if terms.contains(&t) {
            return Err(format!("formula term '{t}' appears twice"));
        }
        terms.push(t);
    }
    Ok(terms)
}

fn param_expr(e: &Expr, what: &str) -> std::result::Result<ParamExpr, String> {
    match e {
        Expr::Num(v) => Ok(ParamExpr::Value(*v)),
        Expr::Ident(s) => Ok(ParamExpr::Symbol(s.clone())),
        other => Err(format!("{what} must be a number or a parameter name, found {}", other.describe())),
    }
}

fn parse_basis(e: &Expr) -> std::result::Result<BasisSpec, String> {
    match e {
        Expr::Ident(s) if s == "identity" => Ok(BasisSpec::Identity),
        Expr::Call(s, args) if s == "bspline" => {
            check_args(s, args, &["degree", "knot_spacing"])?;
            let degree = match arg(args, "degree", 0) {
                Some(d) => as_count(d, "degree")?,
                None => 3,
            };
            let spacing = arg(args, "knot_spacing", 1).ok_or("bspline() needs knot_spacing")?;
            Ok(BasisSpec::BSpline {
                degree,
                knot_spacing: as_num(spacing, "knot_spacing")?,
            })
        }
        other => Err(format!("unknown basis '{other}' (expected identity or bspline(...))")),
    }
}

fn parse_kernel(e: &Expr) -> std::result::Result<KernelTemplate, String> {
    let (name, args) = match e {
        Expr::Call(n, a) => (n.clone(), a.as_slice()),
        Expr::Ident(n) => (n.clone(), &[][..]),
        other => return Err(format!("kernel must be a call like ar1(kappa2=1, rho=0.5), found {}", other.describe())),
    };
    let params = args
        .iter()
        .map(|a| {
            let key = a.key.clone().ok_or_else(|| format!("{name}(): kernel parameters must be named"))?;
            let v = param_expr(&a.value, &key)?;
            Ok((key, v))
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok(KernelTemplate::new(name, params))
}

fn parse_index(e: &Expr) -> std::result::Result<IndexExpr, String> {
    match e {
        Expr::Num(_) => Ok(IndexExpr::Literal(as_count(e, "constraint index")?)),
        Expr::Ident(s) if s == "K" => Ok(IndexExpr::K),
        Expr::Ident(s) if s == "k_star" => Ok(IndexExpr::KStar),
        Expr::Call(s, args) if s == "year" && args.len() == 1 && args[0].key.is_none() => {
            Ok(IndexExpr::Year(as_num(&args[0].value, "year")?))
        }
        other => Err(format!("unknown coefficient index '{other}' (expected a number, K, k_star or year(t))")),
    }
}

fn parse_constraint(e: &Expr) -> std::result::Result<ConstraintExpr, String> {
    let positional = |name: &str, args: &[super::expr::Arg], n: Option<usize>| -> std::result::Result<Vec<IndexExpr>, String> {
        if args.iter().any(|a| a.key.is_some()) {
            return Err(format!("{name}() takes positional arguments"));
        }
        if let Some(n) = n {
            if args.len() != n {
                return Err(format!("{name}() takes {n} argument(s), got {}", args.len()));
            }
        }
        args.iter().map(|a| parse_index(&a.value)).collect()
    };
    match e {
        Expr::Call(s, args) if s == "ref" => Ok(ConstraintExpr::Ref(positional(s, args, Some(1))?.remove(0))),
        Expr::Call(s, args) if s == "sum_range" => {
            let mut v = positional(s, args, Some(2))?;
            let b = v.pop().expect("two arguments");
            let a = v.pop().expect("two arguments");
            Ok(ConstraintExpr::SumRange(a, b))
        }
        Expr::Call(s, args) if s == "list" => {
            let v = positional(s, args, None)?;
            if v.is_empty() {
                return Err("list() needs at least one index".into());
            }
            Ok(ConstraintExpr::List(v))
        }
        other => Err(format!(
            "unknown constraint set '{other}' (expected ref(i), sum_range(a, b) or list(...))"
        )),
    }
}

fn named_num(call: &str, args: &[super::expr::Arg], key: &str, pos: usize) -> std::result::Result<f64, String> {
    let e = arg(args, key, pos).ok_or_else(|| format!("{call}() needs {key}"))?;
    as_num(e, key)
}

/// Parses a prior expression such as `normal(mean=0, sd=1)`.
pub fn parse_prior(e: &Expr) -> std::result::Result<Prior, String> {
    let (name, args) = match e {
        Expr::Ident(n) => (n.as_str(), &[][..]),
        Expr::Call(n, a) => (n.as_str(), a.as_slice()),
        other => return Err(format!("expected a prior, found {}", other.describe())),
    };
    let p = match name {
        "normal" => {
            check_args(name, args, &["mean", "sd"])?;
            Prior::Normal {
                mean: named_num(name, args, "mean", 0)?,
                sd: named_num(name, args, "sd", 1)?,
            }
        }
        "truncated_normal" => {
            check_args(name, args, &["mean", "sd", "lo", "hi"])?;
            Prior::TruncatedNormal {
                mean: named_num(name, args, "mean", 0)?,
                sd: named_num(name, args, "sd", 1)?,
                lo: named_num(name, args, "lo", 2)?,
                hi: named_num(name, args, "hi", 3)?,
            }
        }
        "uniform" => {
            check_args(name, args, &["lo", "hi"])?;
            Prior::Uniform {
                lo: named_num(name, args, "lo", 0)?,
                hi: named_num(name, args, "hi", 1)?,
            }
        }
        "half_normal" => {
            check_args(name, args, &["scale"])?;
            Prior::HalfNormal {
                scale: named_num(name, args, "scale", 0)?,
            }
        }
        "lognormal" => {
            check_args(name, args, &["meanlog", "sdlog"])?;
            Prior::LogNormal {
                meanlog: named_num(name, args, "meanlog", 0)?,
                sdlog: named_num(name, args, "sdlog", 1)?,
            }
        }
        "flat_positive" if args.is_empty() => Prior::FlatPositive,
        other => return Err(format!("unknown prior '{other}'")),
    };
    p.check().map_err(|e| e.to_string())?;
    Ok(p)
}

fn parse_family(e: &Expr) -> std::result::Result<Family, String> {
    match e {
        Expr::Ident(s) if s == "normal" => Ok(Family::Normal),
        Expr::Call(s, args) if s == "truncated_normal" => {
            check_args(s, args, &["lo", "hi"])?;
            Ok(Family::TruncatedNormal {
                lo: named_num(s, args, "lo", 0)?,
                hi: named_num(s, args, "hi", 1)?,
            })
        }
        other => Err(format!(
            "unknown hierarchy family '{other}' (expected normal or truncated_normal(lo=, hi=))"
        )),
    }
}

/// Parses an estimation strategy such as `fixed(0.7)` or `hierarchical(...)`.
pub fn parse_strategy(e: &Expr) -> std::result::Result<EstimationStrategy, String> {
    let args = e.args();
    match e.head() {
        Some("fixed") => {
            check_args("fixed", args, &["value"])?;
            Ok(EstimationStrategy::Fixed(named_num("fixed", args, "value", 0)?))
        }
        Some("vague") if args.is_empty() => Ok(EstimationStrategy::Vague(None)),
        Some("vague") => {
            check_args("vague", args, &["lo", "hi"])?;
            Ok(EstimationStrategy::Vague(Some((
                named_num("vague", args, "lo", 0)?,
                named_num("vague", args, "hi", 1)?,
            ))))
        }
        Some("hierarchical") => {
            check_args("hierarchical", args, &["pi", "levels", "groupings", "scale"])?;
            let family = match arg(args, "pi", 0) {
                Some(p) => parse_family(p)?,
                None => Family::Normal,
            };
            let levels = match arg(args, "levels", 1) {
                Some(l) => as_count(l, "levels")?,
                None => 1,
            };
            let groupings = match arg(args, "groupings", 2) {
                Some(Expr::Str(s)) => s.clone(),
                Some(other) => return Err(format!("groupings must be a quoted string, found {}", other.describe())),
                None => String::new(),
            };
            let scale = match arg(args, "scale", 3).map(|s| s.head()) {
                None | Some(Some("identity")) => HierarchyScale::Identity,
                Some(Some("log")) => HierarchyScale::Log,
                Some(Some("logit")) => HierarchyScale::Logit,
                Some(_) => return Err("scale must be identity, log or logit".into()),
            };
            Ok(EstimationStrategy::Hierarchical(HierarchySpec {
                family,
                levels,
                groupings,
                scale,
            }))
        }
        Some("multiplicative_tn") => {
            check_args(
                "multiplicative_tn",
                args,
                &["lo", "hi", "scale", "sigma_w", "sigma_lambda"],
            )?;
            let mut m = MultiplicativeSpec::default();
            if let Some(x) = arg(args, "lo", 0) {
                m.lo = as_num(x, "lo")?;
            }
            if let Some(x) = arg(args, "hi", 1) {
                m.hi = as_num(x, "hi")?;
            }
            m.scale = match arg(args, "scale", 2).map(|s| s.head()) {
                None | Some(Some("variance")) => MultiplierScale::Variance,
                Some(Some("sd")) => MultiplierScale::Sd,
                Some(_) => return Err("scale must be variance or sd".into()),
            };
            m.sigma_w = arg(args, "sigma_w", 3).map(|x| as_num(x, "sigma_w")).transpose()?;
            m.sigma_lambda = arg(args, "sigma_lambda", 4).map(|x| as_num(x, "sigma_lambda")).transpose()?;
            Ok(EstimationStrategy::MultiplicativeTn(m))
        }
        _ => parse_prior(e)
            .map(EstimationStrategy::Informative)
            .map_err(|m| format!("{m}; expected fixed, vague, a prior, hierarchical or multiplicative_tn")),
    }
}

fn parse_projection(e: &Expr) -> std::result::Result<ProjectionOptions, String> {
    let (mode, args) = match e {
        Expr::Ident(m) => (m.clone(), &[][..]),
        Expr::Call(m, a) => (m.clone(), a.as_slice()),
        other => return Err(format!("projection must be a mode name, found {}", other.describe())),
    };
    if args.iter().any(|a| a.key.is_none()) {
        return Err("projection options must be named (W=, G=, V=)".into());
    }
    check_args(&mode, args, &["W", "G", "V"])?;
    let get = |k: &str| arg(args, k, usize::MAX).map(|x| as_num(x, k)).transpose();
    Ok(ProjectionOptions {
        mode,
        w: get("W")?,
        g: get("G")?,
        v: get("V")?,
    })
}

/// Parses a specification, collecting every error with its line number.
pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    let mut errors = Errors::default();
    let sections = split_sections(text, &mut errors);
    let eof = text.lines().count().max(1);
    for name in REQUIRED_SECTIONS {
        if !sections.iter().any(|s| s.name == name) {
            errors.push(eof, format!("missing section: {name}"));
        }
    }
    let find = |name: &str| sections.iter().find(|s| s.name == name);
    let mut lines = SourceLines::default();

    // Process model formula
    let mut citation = None;
    let mut eta = None;
    let mut link = Link::Identity;
    let mut formula = Vec::new();
    if let Some(sec) = find("Process model formula") {
        if sec.absent {
            errors.push(sec.line, "the process model formula cannot be absent");
        }
        let mut f = Fields::new(sec, &mut errors);
        citation = optional_text(f.take("citation"));
        eta = optional_text(f.take("eta"));
        if let Some(e) = f.require("g1", &mut errors) {
            record(&mut lines, sec.name, e);
            match e.value.parse::<Link>() {
                Ok(l) => link = l,
                Err(m) => errors.push(e.line, m.to_string()),
            }
        }
        if let Some(e) = f.require("formula", &mut errors) {
            record(&mut lines, sec.name, e);
            match parse_formula(&e.value) {
                Ok(t) => formula = t,
                Err(m) => errors.push(e.line, m),
            }
        }
        f.finish(&mut errors);
    }

    // Grid
    let mut grid = None;
    if let Some(sec) = find("Grid").filter(|s| !s.absent) {
        let mut f = Fields::new(sec, &mut errors);
        let start = f.require("start", &mut errors).and_then(|e| num_at(e, &mut errors));
        let end = f.require("end", &mut errors).and_then(|e| num_at(e, &mut errors));
        let step = match f.take("step") {
            Some(e) => num_at(e, &mut errors),
            None => Some(1.0),
        };
        let pops = f.require("populations", &mut errors).map(|e| {
            record(&mut lines, sec.name, e);
            let v = name_list(&e.value);
            if v.is_empty() {
                errors.push(e.line, "populations list is empty");
            }
            v
        });
        lines.0.insert("Grid/".into(), sec.line);
        f.finish(&mut errors);
        if let (Some(start), Some(end), Some(step), Some(populations)) = (start, end, step, pops) {
            grid = Some(GridSpec {
                start,
                end,
                step,
                populations,
            });
        }
    }

    let component = |sec: Option<&Section>, key: &str, list_key: Option<&str>, errors: &mut Errors, lines: &mut SourceLines| {
        let mut cfg = ComponentConfig::new("none");
        let Some(sec) = sec.filter(|s| !s.absent) else {
            return cfg;
        };
        let mut f = Fields::new(sec, errors);
        if let Some(e) = f.require(key, errors) {
            record(lines, sec.name, e);
            if !is_absent(&e.value) {
                cfg.variant = e.value.clone();
            }
        }
        if let Some(lk) = list_key {
            if let Some(e) = f.take(lk) {
                record(lines, sec.name, e);
                if !is_absent(&e.value) {
                    cfg.covariates = name_list(&e.value);
                }
            }
        }
        for e in f.rest() {
            record(lines, sec.name, e);
            cfg.options.insert(e.key.clone(), e.value.clone());
        }
        cfg
    };
    let covariate = component(
        find("Covariate Component"),
        "g2",
        Some("covariates"),
        &mut errors,
        &mut lines,
    );
    let systematic = component(find("Systematic Component"), "g3", None, &mut errors, &mut lines);

    // Offsets
    let mut offsets = None;
    if let Some(sec) = find("Offsets").filter(|s| !s.absent) {
        let mut f = Fields::new(sec, &mut errors);
        if let Some(e) = f.require("a", &mut errors) {
            record(&mut lines, sec.name, e);
            offsets = optional_text(Some(e));
        }
        f.finish(&mut errors);
    }

    // Smoothing Component
    let mut smoother = None;
    if let Some(sec) = find("Smoothing Component").filter(|s| !s.absent) {
        let mut f = Fields::new(sec, &mut errors);
        let keys = ["B", "s", "r", "K"];
        let entries: Vec<Option<&Entry>> = keys.iter().map(|k| f.take(k)).collect();
        f.finish(&mut errors);
        for e in entries.iter().flatten() {
            record(&mut lines, sec.name, e);
        }
        let present: Vec<bool> = entries.iter().map(|e| e.is_some_and(|e| !is_absent(&e.value))).collect();
        if present.iter().any(|p| *p) {
            for (k, e) in keys.iter().zip(&entries) {
                if e.is_none() {
                    errors.push(sec.line, format!("section [{}] is missing key '{k}'", sec.name));
                }
            }
            let [b, s, r, kk] = [entries[0], entries[1], entries[2], entries[3]];
            let basis = b.and_then(|e| {
                if is_absent(&e.value) {
                    errors.push(e.line, "B cannot be absent when a smoother is given");
                    return None;
                }
                let x = expr_at(e, &mut errors)?;
                parse_basis(&x).map_err(|m| errors.push(e.line, m)).ok()
            });
            let kernel = s.and_then(|e| {
                if is_absent(&e.value) {
                    errors.push(e.line, "s cannot be absent when a smoother is given");
                    return None;
                }
                let x = expr_at(e, &mut errors)?;
                parse_kernel(&x).map_err(|m| errors.push(e.line, m)).ok()
            });
            let order = r.and_then(|e| {
                if is_absent(&e.value) {
                    return Some(0);
                }
                match e.value.parse::<usize>() {
                    Ok(v) => Some(v),
                    Err(_) => {
                        errors.push(e.line, format!("r must be a non-negative integer, found '{}'", e.value));
                        None
                    }
                }
            });
            let constraints = kk.and_then(|e| {
                if is_absent(&e.value) {
                    return Some(Vec::new());
                }
                let x = expr_at(e, &mut errors)?;
                let items = match x {
                    Expr::List(v) => v,
                    single => vec![single],
                };
                items
                    .iter()
                    .map(parse_constraint)
                    .collect::<std::result::Result<Vec<_>, String>>()
                    .map_err(|m| errors.push(e.line, m))
                    .ok()
            });
            if let (Some(basis), Some(kernel), Some(r), Some(constraints)) = (basis, kernel, order, constraints) {
                smoother = Some(SmootherTemplate {
                    basis,
                    kernel,
                    r,
                    constraints,
                });
            }
        }
    }

    // Projections
    let mut projection = None;
    if let Some(sec) = find("Projections").filter(|s| !s.absent) {
        let mut f = Fields::new(sec, &mut errors);
        if let Some(e) = f.require("projection", &mut errors) {
            record(&mut lines, sec.name, e);
            if !is_absent(&e.value) {
                if let Some(x) = expr_at(e, &mut errors) {
                    match parse_projection(&x) {
                        Ok(p) => projection = Some(p),
                        Err(m) => errors.push(e.line, m),
                    }
                }
            }
        }
        f.finish(&mut errors);
    }

    // Parameter Estimation: a repeated name is kept so validation can report it
    let mut bindings = Vec::new();
    if let Some(sec) = find("Parameter Estimation").filter(|s| !s.absent) {
        for e in &sec.entries {
            if !e.key.chars().all(|c| c.is_alphanumeric() || c == '_') {
                errors.push(e.line, format!("'{}' is not a parameter name", e.key));
                continue;
            }
            let Some(x) = expr_at(e, &mut errors) else { continue };
            match parse_strategy(&x) {
                Ok(strategy) => bindings.push(Binding {
                    name: e.key.clone(),
                    strategy,
                    line: SourceLine(Some(e.line)),
                }),
                Err(m) => errors.push(e.line, format!("{}: {m}", e.key)),
            }
        }
    }

    // Data Model
    let mut data_model = DataModelSpec::new(link);
    if let Some(sec) = find("Data Model").filter(|s| !s.absent) {
        let mut f = Fields::new(sec, &mut errors);
        if let Some(e) = f.take("transformation") {
            match e.value.parse::<Link>() {
                Ok(l) => data_model.transformation = l,
                Err(m) => errors.push(e.line, m.to_string()),
            }
        }
        for e in f.rest() {
            let (field, source) = match e.key.split_once('.') {
                Some((a, b)) => (a, Some(b.trim())),
                None => (e.key.as_str(), None),
            };
            let Some(x) = expr_at(e, &mut errors) else { continue };
            let value = match param_expr(&x, &e.key) {
                Ok(v) => v,
                Err(m) => {
                    errors.push(e.line, m);
                    continue;
                }
            };
            let terms: &mut SourceTerms = match source {
                None => &mut data_model.default,
                Some("") => {
                    errors.push(e.line, format!("empty source name in '{}'", e.key));
                    continue;
                }
                Some(s) => data_model.sources.entry(s.to_string()).or_default(),
            };
            match field {
                "bias" => terms.bias = value,
                "nonsampling_variance" => terms.nonsampling_variance = value,
                other => errors.push(e.line, format!("unknown key '{other}' in [Data Model]")),
            }
        }
    }

    if !errors.0.is_empty() {
        errors.0.sort_by_key(|e| e.line);
        return Err(TmmpError::Parse(errors.0));
    }
    Ok(ModelSpec {
        citation,
        eta,
        link,
        formula,
        grid,
        covariate,
        systematic,
        offsets,
        smoother,
        projection,
        bindings,
        data_model,
        lines,
    })
}
