//! Built-in vulnerable and benign fixtures.
//!
//! Each case is a `.wat` module plus a `.case.json` describing inputs and
//! expected outcomes. Payloads are stored as hex and written to memory framed
//! as a little-endian u32 length followed by the bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::{
    Instance, InstantiateError, InvokeError, MemoryAccessError, Outcome, RunResult, TimeSource,
};
use crate::ir::Module;
use crate::passes::{apply_passes, PassConfig, PassError};
use crate::wat::{parse_module, ParseError};

struct Fixture {
    name: &'static str,
    wat: &'static str,
    case: &'static str,
}

const FIXTURES: [Fixture; 3] = [
    Fixture {
        name: "hijack_indirect",
        wat: include_str!("../corpus/hijack_indirect.wat"),
        case: include_str!("../corpus/hijack_indirect.case.json"),
    },
    Fixture {
        name: "linear_overwrite",
        wat: include_str!("../corpus/linear_overwrite.wat"),
        case: include_str!("../corpus/linear_overwrite.case.json"),
    },
    Fixture {
        name: "benign_copy",
        wat: include_str!("../corpus/benign_copy.wat"),
        case: include_str!("../corpus/benign_copy.case.json"),
    },
];

pub fn case_names() -> Vec<&'static str> {
    FIXTURES.iter().map(|f| f.name).collect()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown corpus case \"{name}\"; available: {available}")]
    UnknownCase { name: String, available: String },
    #[error("corpus case \"{0}\" is malformed: {1}")]
    Malformed(String, String),
}

#[derive(Debug, Error)]
pub enum CaseRunError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Instantiate(#[from] InstantiateError),
    #[error(transparent)]
    Invoke(#[from] InvokeError),
    #[error(transparent)]
    Memory(#[from] MemoryAccessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigName {
    None,
    Aslr,
    Canary,
    Both,
}

impl ConfigName {
    pub const ALL: [ConfigName; 4] = [
        ConfigName::None,
        ConfigName::Aslr,
        ConfigName::Canary,
        ConfigName::Both,
    ];

    pub fn pass_config(self) -> Option<PassConfig> {
        match self {
            ConfigName::None => None,
            ConfigName::Aslr => Some(PassConfig::aslr()),
            ConfigName::Canary => Some(PassConfig::canary()),
            ConfigName::Both => Some(PassConfig::both()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::None => "none",
            ConfigName::Aslr => "aslr",
            ConfigName::Canary => "canary",
            ConfigName::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Benign,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub config: ConfigName,
    pub input: InputKind,
    pub time: i32,
    pub outcome: Outcome,
    /// Expected final value of the case's flag global.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub name: String,
    pub module: String,
    pub entry: String,
    pub input_addr: u32,
    pub benign_input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_input: Option<String>,
    pub overrun_bytes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_global: Option<String>,
    /// `[start, end)` of linear memory the stack may occupy.
    pub stack_region: [u32; 2],
    pub expectations: Vec<Expectation>,
    #[serde(skip)]
    pub source: String,
}

/// Length-prefixed layout read by the fixtures' `$main`.
pub fn frame_input(payload: &[u8]) -> Vec<u8> {
    let mut out = (payload.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(payload);
    out
}

pub fn load_corpus_case(name: &str) -> Result<CorpusCase, CorpusError> {
    let fixture =
        FIXTURES
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| CorpusError::UnknownCase {
                name: name.to_string(),
                available: case_names().join(", "),
            })?;
    let bad = |msg: String| CorpusError::Malformed(name.to_string(), msg);
    let mut case: CorpusCase =
        serde_json::from_str(fixture.case).map_err(|e| bad(e.to_string()))?;
    hex::decode(&case.benign_input).map_err(|e| bad(format!("benign_input: {e}")))?;
    if let Some(a) = &case.attack_input {
        hex::decode(a).map_err(|e| bad(format!("attack_input: {e}")))?;
    }
    case.source = fixture.wat.to_string();
    Ok(case)
}

impl CorpusCase {
    pub fn benign_payload(&self) -> Vec<u8> {
        hex::decode(&self.benign_input).expect("checked on load")
    }

    pub fn attack_payload(&self) -> Option<Vec<u8>> {
        self.attack_input
            .as_ref()
            .map(|a| hex::decode(a).expect("checked on load"))
    }

    pub fn payload(&self, kind: InputKind) -> Option<Vec<u8>> {
        match kind {
            InputKind::Benign => Some(self.benign_payload()),
            InputKind::Attack => self.attack_payload(),
        }
    }

    pub fn parse(&self) -> Result<Module, ParseError> {
        parse_module(&self.source)
    }

    /// The case's module with `config` applied.
    pub fn build(&self, config: ConfigName) -> Result<Module, CaseRunError> {
        let module = self.parse()?;
        Ok(match config.pass_config() {
            None => module,
            Some(cfg) => apply_passes(module, &cfg)?.module,
        })
    }

    /// Instantiates `module`, writes the framed payload and invokes the entry.
    pub fn execute(
        &self,
        module: &Module,
        payload: &[u8],
        time: i32,
    ) -> Result<(RunResult, Instance), CaseRunError> {
        let mut inst = Instance::instantiate(module, TimeSource::Fixed(time))?;
        inst.poke_input(self.input_addr, &frame_input(payload))?;
        let result = inst.invoke(&self.entry, &[])?;
        Ok((result, inst))
    }

    pub fn flag(&self, inst: &Instance) -> Option<i32> {
        self.flag_global.as_deref().and_then(|g| inst.global(g))
    }
}
