//! Pass orchestration.
//!
//! Each protected function is first normalized to a single exit: the original
//! body goes into one wrapper block, and every `return` becomes a branch to
//! that block. Prologues are prepended before the wrapper and epilogues
//! appended after it, so every instruction a pass inserts runs once per call
//! on non-trapping paths.

pub mod aslr;
pub mod canary;
pub mod table_shuffle;

use std::collections::BTreeSet;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::*;
use crate::rng::{self, EmbedError, PrngHandles};
pub use table_shuffle::{ShuffleError, ShuffleReport};

pub const DEFAULT_SKIP_NAMES: [&str; 4] = [
    "$stackAlloc",
    "$emscripten_stack_init",
    "$emscripten_stack_restore",
    "$emscripten_stack_get_current",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    HostTime,
    Fixed(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassConfig {
    pub enable_aslr: bool,
    pub enable_canary: bool,
    pub enable_table_shuffle: bool,
    /// Function symbols left untouched, with or without the leading `$`.
    pub skip_names: BTreeSet<String>,
    pub sp_override: Option<String>,
    /// Seeds the transform-time generator used by the table shuffle.
    pub seed_mode: SeedMode,
    /// Refuse to shuffle when some indirect call site cannot be rewritten.
    pub strict_shuffle: bool,
}

impl Default for PassConfig {
    fn default() -> Self {
        PassConfig {
            enable_aslr: false,
            enable_canary: false,
            enable_table_shuffle: false,
            skip_names: DEFAULT_SKIP_NAMES.iter().map(|s| s.to_string()).collect(),
            sp_override: None,
            seed_mode: SeedMode::HostTime,
            strict_shuffle: false,
        }
    }
}

impl PassConfig {
    pub fn canary() -> Self {
        PassConfig {
            enable_canary: true,
            ..Default::default()
        }
    }

    pub fn aslr() -> Self {
        PassConfig {
            enable_aslr: true,
            ..Default::default()
        }
    }

    pub fn both() -> Self {
        PassConfig {
            enable_aslr: true,
            enable_canary: true,
            ..Default::default()
        }
    }

    pub fn is_skipped(&self, name: Option<&str>) -> bool {
        let Some(name) = name else { return false };
        self.skip_names
            .iter()
            .any(|s| s.strip_prefix('$').unwrap_or(s) == name)
    }

    /// Names of the enabled passes, in application order.
    pub fn pass_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.enable_canary {
            out.push("canary");
        }
        if self.enable_aslr {
            out.push("aslr");
        }
        if self.enable_table_shuffle {
            out.push("table_shuffle");
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PassError {
    #[error("no pass enabled")]
    NoPassEnabled,
    #[error(transparent)]
    StackPointer(#[from] IrError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("refusing to instrument runtime function `${0}`")]
    SelfInstrumentation(String),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
}

/// Instruction counts per category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub arithmetic: u64,
    pub variable: u64,
    pub memory: u64,
    pub control: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub other: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl CategoryCounts {
    pub fn of(body: &[Instr]) -> Self {
        let mut c = CategoryCounts::default();
        for ins in body {
            c.add(ins.category(), 1);
        }
        c
    }

    pub fn add(&mut self, cat: Category, n: u64) {
        *self.get_mut(cat) += n;
    }

    pub fn get(&self, cat: Category) -> u64 {
        match cat {
            Category::Arithmetic => self.arithmetic,
            Category::Variable => self.variable,
            Category::Memory => self.memory,
            Category::Control => self.control,
            Category::Other => self.other,
        }
    }

    fn get_mut(&mut self, cat: Category) -> &mut u64 {
        match cat {
            Category::Arithmetic => &mut self.arithmetic,
            Category::Variable => &mut self.variable,
            Category::Memory => &mut self.memory,
            Category::Control => &mut self.control,
            Category::Other => &mut self.other,
        }
    }

    pub fn total(&self) -> u64 {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }

    /// Per-category `self - base`; `None` if any category would go negative.
    pub fn checked_sub(&self, base: &CategoryCounts) -> Option<CategoryCounts> {
        let mut out = CategoryCounts::default();
        for c in Category::ALL {
            *out.get_mut(c) = self.get(c).checked_sub(base.get(c))?;
        }
        Some(out)
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a CategoryCounts>) -> CategoryCounts {
        let mut out = CategoryCounts::default();
        for it in items {
            for c in Category::ALL {
                out.add(c, it.get(c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunctionStats {
    pub name: String,
    pub skipped: bool,
    pub inserted: CategoryCounts,
    /// Inserted instructions reached only when a check fails (the canary
    /// epilogue's `unreachable`).
    pub trap_only: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InsertionStats {
    pub functions: Vec<FunctionStats>,
}

impl InsertionStats {
    pub fn totals(&self) -> CategoryCounts {
        CategoryCounts::sum(self.functions.iter().map(|f| &f.inserted))
    }

    pub fn get(&self, name: &str) -> Option<&FunctionStats> {
        self.functions.iter().find(|f| f.name == name)
    }
}

/// Everything the passes need at an injection site.
#[derive(Debug, Clone)]
pub struct Runtime {
    pub sp: StackPointerRef,
    pub prng: PrngHandles,
}

/// Rewrites `body` into `block (result ..) body end`, turning each `return`
/// into a branch to the new block. Branches that targeted the function label
/// now land on the wrapper, which sits at the same depth.
pub fn wrap_exits(body: Vec<Instr>, result: BlockType) -> Vec<Instr> {
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(Instr::Block(result));
    let mut depth = 0u32;
    for ins in body {
        match ins {
            Instr::Block(_) | Instr::Loop(_) => depth += 1,
            Instr::End => depth = depth.saturating_sub(1),
            _ => {}
        }
        out.push(match ins {
            Instr::Return => Instr::Br(depth),
            other => other,
        });
    }
    out.push(Instr::End);
    out
}

/// Single-exit normalization of a function in place.
pub fn wrap_body_for_epilogue(func: &mut Function, result: BlockType) {
    let body = std::mem::take(&mut func.body);
    func.body = wrap_exits(body, result);
}

/// A wrapped function body under construction. Each pass appends to the
/// prologue and prepends to the epilogue, so later passes nest inside
/// earlier ones.
#[derive(Debug, Default)]
pub struct InjectionSite {
    pub prologue: Vec<Instr>,
    pub epilogue: Vec<Instr>,
    seeded: bool,
}

impl InjectionSite {
    pub fn new() -> Self {
        Self::default()
    }

    /// Emits the seeding sequence unless an earlier pass already did.
    pub fn ensure_seeded(&mut self, prng: &PrngHandles) {
        if !self.seeded {
            self.prologue
                .extend([Instr::Call(prng.time_func), Instr::Call(prng.seed_func)]);
            self.seeded = true;
        }
    }

    pub fn is_seeded(&self) -> bool {
        self.seeded
    }

    pub fn prepend_epilogue(&mut self, code: Vec<Instr>) {
        let rest = std::mem::replace(&mut self.epilogue, code);
        self.epilogue.extend(rest);
    }

    /// Splices prologue and epilogue around the (already wrapped) body.
    pub fn install(self, func: &mut Function) {
        let mut body = self.prologue;
        body.append(&mut func.body);
        body.extend(self.epilogue);
        func.body = body;
    }
}

pub(crate) fn refuse_runtime(func: &Function) -> Result<(), PassError> {
    if rng::is_runtime_function(func.name.as_deref()) {
        return Err(PassError::SelfInstrumentation(
            func.name.clone().unwrap_or_default(),
        ));
    }
    Ok(())
}

#[derive(Debug)]
pub struct PassOutcome {
    pub module: Module,
    pub stats: InsertionStats,
    pub stack_pointer: Option<StackPointerRef>,
    pub prng: Option<PrngHandles>,
    pub shuffle: Option<ShuffleReport>,
}

fn shuffle_rng(mode: SeedMode) -> ChaCha8Rng {
    match mode {
        SeedMode::Fixed(v) => ChaCha8Rng::seed_from_u64(u64::from(v)),
        SeedMode::HostTime => {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
            ChaCha8Rng::seed_from_u64(now)
        }
    }
}

/// Runs the enabled passes over `module`.
pub fn apply_passes(mut module: Module, config: &PassConfig) -> Result<PassOutcome, PassError> {
    if !(config.enable_aslr || config.enable_canary || config.enable_table_shuffle) {
        return Err(PassError::NoPassEnabled);
    }
    let original_count = module.functions.len();
    let before: Vec<Vec<Instr>> = module.functions.iter().map(|f| f.body.clone()).collect();

    let mut stack_pointer = None;
    let mut prng = None;
    let targets: Vec<usize> = (0..original_count)
        .filter(|&i| !config.is_skipped(module.functions[i].name.as_deref()))
        .collect();
    // nothing to instrument: leave the module free of runtime support too
    if (config.enable_aslr || config.enable_canary) && !targets.is_empty() {
        let sp = find_stack_pointer(&module, config.sp_override.as_deref())?;
        let handles = rng::embed_prng(&mut module)?;
        let rt = Runtime {
            sp: sp.clone(),
            prng: handles,
        };
        for &i in &targets {
            let result = module.types[module.functions[i].type_idx as usize].result;
            let func = &mut module.functions[i];
            refuse_runtime(func)?;
            wrap_body_for_epilogue(func, result);
            let mut site = InjectionSite::new();
            if config.enable_canary {
                canary::inject_canary(func, &mut site, &rt)?;
            }
            if config.enable_aslr {
                aslr::inject_aslr(func, &mut site, &rt)?;
            }
            site.install(func);
        }
        stack_pointer = Some(sp);
        prng = Some(handles);
    }

    let shuffle = if config.enable_table_shuffle {
        let mut rng = shuffle_rng(config.seed_mode);
        Some(table_shuffle::shuffle_elem_segment(
            &mut module,
            &mut rng,
            config.strict_shuffle,
        )?)
    } else {
        None
    };

    let functions = (0..original_count)
        .map(|i| {
            let after = &module.functions[i].body;
            let inserted = CategoryCounts::of(after)
                .checked_sub(&CategoryCounts::of(&before[i]))
                .unwrap_or_default();
            let traps = |b: &[Instr]| b.iter().filter(|x| **x == Instr::CanaryTrap).count() as u64;
            FunctionStats {
                name: module.function_key(i),
                skipped: config.is_skipped(module.functions[i].name.as_deref()),
                inserted,
                trap_only: traps(after).saturating_sub(traps(&before[i])),
            }
        })
        .collect();

    Ok(PassOutcome {
        module,
        stats: InsertionStats { functions },
        stack_pointer,
        prng,
        shuffle,
    })
}
