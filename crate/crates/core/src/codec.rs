//! Token vocabulary, scalar embeddings, observation vectors and the flat
//! action enumeration.
//!
//! Every token belongs to one of twelve categories. A token at `(c, i)` in a
//! category of size `N` embeds to `(c + (i + 1) / (N + 1)) / 12`, which
//! places each category inside its own half-open interval `[c/12, (c+1)/12)`
//! and keeps 0.0 free for padding.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::{
    self, address_token, subnet_token, Command, InfoItem, ItemKind, Parameter, Protocol,
    SubAction, Verdict,
};

pub const CATEGORY_COUNT: usize = 12;
pub const OBS_DIM: usize = 16;
pub const ACTION_COUNT: usize = 104;
pub const VOCAB_SCHEMA: &str = "netop-vocab-1";

pub const PAD: &str = "PAD";
pub const NONE: &str = "NONE";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("({category}, {index}) is outside the vocabulary")]
    OutOfRange { category: usize, index: usize },
    #[error("action {0} is outside [0, 103]")]
    ActionOutOfRange(u16),
    #[error("action {action} is not legal in the {phase} phase")]
    PhaseIllegal { action: u16, phase: Phase },
    #[error("cannot encode {0:?} as an action")]
    Unencodable(SubAction),
    #[error("observation contract violated: {0}")]
    Contract(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Special = 0,
    IpAddress = 1,
    IpSubnet = 2,
    DeviceName = 3,
    InterfaceName = 4,
    PortStatus = 5,
    RoutingProtocol = 6,
    Command = 7,
    Phase = 8,
    Boolean = 9,
    Version = 10,
    ItemKind = 11,
}

impl Category {
    pub const ALL: [Category; CATEGORY_COUNT] = [
        Category::Special,
        Category::IpAddress,
        Category::IpSubnet,
        Category::DeviceName,
        Category::InterfaceName,
        Category::PortStatus,
        Category::RoutingProtocol,
        Category::Command,
        Category::Phase,
        Category::Boolean,
        Category::Version,
        Category::ItemKind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Special => "SPECIAL",
            Category::IpAddress => "IP-ADDRESS",
            Category::IpSubnet => "IP-SUBNET",
            Category::DeviceName => "DEVICE-NAME",
            Category::InterfaceName => "INTERFACE-NAME",
            Category::PortStatus => "PORT-STATUS",
            Category::RoutingProtocol => "ROUTING-PROTOCOL",
            Category::Command => "COMMAND",
            Category::Phase => "PHASE",
            Category::Boolean => "BOOLEAN",
            Category::Version => "VERSION",
            Category::ItemKind => "ITEM-KIND",
        }
    }
}

/// Sub-step of the instruction protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Diagnose,
    Command,
    Parameter,
}

impl Phase {
    pub fn token(self) -> &'static str {
        match self {
            Phase::Diagnose => "diagnose",
            Phase::Command => "command",
            Phase::Parameter => "parameter",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Bijection between token text and `(category, index)`.
#[derive(Debug)]
pub struct Vocabulary {
    categories: Vec<Vec<String>>,
    lookup: HashMap<String, (usize, usize)>,
}

impl Vocabulary {
    fn build() -> Self {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let categories = vec![
            strs(&[PAD, netsim::ABSENT, NONE]),
            (1..=netsim::MAX_ADDRESSES as u16).map(address_token).collect(),
            (1..=netsim::MAX_SUBNETS as u16).map(subnet_token).collect(),
            (0..netsim::MAX_DEVICES).map(netsim::device_name).collect(),
            (0..netsim::MAX_INTERFACES).map(netsim::interface_name).collect(),
            strs(&[netsim::PORT_OPEN, netsim::PORT_CLOSED]),
            Protocol::ALL.iter().map(|p| p.token().to_string()).collect(),
            Command::ALL.iter().map(|c| c.token().to_string()).collect(),
            [Phase::Diagnose, Phase::Command, Phase::Parameter]
                .iter()
                .map(|p| p.token().to_string())
                .collect(),
            strs(&[netsim::SUMMARY_DISABLED, netsim::SUMMARY_ENABLED]),
            strs(&[netsim::VERSION_1, netsim::VERSION_2]),
            ItemKind::ALL.iter().map(|k| k.token().to_string()).collect(),
        ];
        let mut lookup = HashMap::new();
        for (c, tokens) in categories.iter().enumerate() {
            for (i, t) in tokens.iter().enumerate() {
                let dup = lookup.insert(t.clone(), (c, i));
                assert!(dup.is_none(), "duplicate token {t}");
            }
        }
        Self { categories, lookup }
    }

    /// The process-wide vocabulary.
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn pool_size(&self, category: usize) -> Option<usize> {
        self.categories.get(category).map(Vec::len)
    }

    pub fn tokens(&self, category: usize) -> &[String] {
        &self.categories[category]
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<(usize, usize), CodecError> {
        self.lookup
            .get(text)
            .copied()
            .ok_or_else(|| CodecError::UnknownToken(text.to_string()))
    }

    pub fn decode(&self, category: usize, index: usize) -> Result<&str, CodecError> {
        self.categories
            .get(category)
            .and_then(|c| c.get(index))
            .map(String::as_str)
            .ok_or(CodecError::OutOfRange { category, index })
    }

    /// The vocabulary and action table as a JSON artifact (sorted keys,
    /// newline-terminated).
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct CategoryDoc<'a> {
            id: usize,
            name: &'static str,
            tokens: &'a [String],
        }
        #[derive(Serialize)]
        struct VocabDoc<'a> {
            actions: Vec<String>,
            categories: Vec<CategoryDoc<'a>>,
            schema: &'static str,
        }
        let doc = VocabDoc {
            actions: (0..ACTION_COUNT as u16).map(|a| ActionId(a).name()).collect(),
            categories: Category::ALL
                .iter()
                .map(|c| CategoryDoc {
                    id: *c as usize,
                    name: c.name(),
                    tokens: &self.categories[*c as usize],
                })
                .collect(),
            schema: VOCAB_SCHEMA,
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("vocab serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of [`Vocabulary::to_json`]; stored in checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn encode_token(text: &str) -> Result<(usize, usize), CodecError> {
    Vocabulary::get().encode(text)
}

pub fn decode_token(category: usize, index: usize) -> Result<&'static str, CodecError> {
    Vocabulary::get().decode(category, index)
}

pub fn vocab_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| Vocabulary::get().hash())
}

pub fn embed(category: usize, index: usize) -> Result<f64, CodecError> {
    let n = Vocabulary::get()
        .pool_size(category)
        .filter(|n| index < *n)
        .ok_or(CodecError::OutOfRange { category, index })?;
    Ok((category as f64 + (index as f64 + 1.0) / (n as f64 + 1.0)) / CATEGORY_COUNT as f64)
}

pub fn embed_token(text: &str) -> Result<f64, CodecError> {
    let (c, i) = encode_token(text)?;
    embed(c, i)
}

pub type Observation = [f64; OBS_DIM];

pub const PAD_OBSERVATION: Observation = [0.0; OBS_DIM];

pub mod slot {
    pub const PHASE: usize = 0;
    pub const ITEM_KIND: usize = 1;
    pub const DEVICE: usize = 2;
    pub const INTERFACE: usize = 3;
    pub const DESIGN: usize = 4;
    pub const CURRENT: usize = 5;
    pub const PENDING: usize = 6;
    pub const PROTOCOL: usize = 7;
}

/// Embeds one item at one sub-step. `pending` must be set exactly in the
/// parameter phase.
pub fn build_observation(
    item: &InfoItem,
    phase: Phase,
    pending: Option<Command>,
) -> Result<Observation, CodecError> {
    if pending.is_some() != (phase == Phase::Parameter) {
        return Err(CodecError::Contract("pending command is set iff phase = parameter"));
    }
    let mut obs = PAD_OBSERVATION;
    obs[slot::PHASE] = embed_token(phase.token())?;
    obs[slot::ITEM_KIND] = embed_token(item.kind.token())?;
    obs[slot::DEVICE] = embed_token(&item.device)?;
    if let Some(iface) = &item.interface {
        obs[slot::INTERFACE] = embed_token(iface)?;
    }
    obs[slot::DESIGN] = embed_token(&item.design_value)?;
    obs[slot::CURRENT] = embed_token(&item.current_value)?;
    if let Some(cmd) = pending {
        obs[slot::PENDING] = embed_token(cmd.token())?;
    }
    obs[slot::PROTOCOL] = embed_token(item.protocol.token())?;
    Ok(obs)
}

/// Flat discrete action in `[0, 104)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u16);

impl ActionId {
    pub const NO_FAULT: ActionId = ActionId(0);
    pub const FAULT_DETECTED: ActionId = ActionId(1);
    pub const FIRST_COMMAND: u16 = 2;
    pub const PARAM_NONE: ActionId = ActionId(8);
    pub const FIRST_ADDRESS: u16 = 9;
    pub const FIRST_SUBNET: u16 = 72;

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Phase in which this action is legal.
    pub fn phase(self) -> Option<Phase> {
        match self.0 {
            0..=1 => Some(Phase::Diagnose),
            2..=7 => Some(Phase::Command),
            8..=103 => Some(Phase::Parameter),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self.0 {
            0 => "NO_FAULT".into(),
            1 => "FAULT_DETECTED".into(),
            2..=7 => {
                let c = Command::ALL[(self.0 - Self::FIRST_COMMAND) as usize];
                format!("CMD_{}", c.token().replace('-', "_").to_uppercase())
            }
            8 => "PARAM_NONE".into(),
            9..=71 => format!("PARAM_ADDR_{}", self.0 - Self::FIRST_ADDRESS + 1),
            72..=103 => format!("PARAM_SUBNET_{}", self.0 - Self::FIRST_SUBNET + 1),
            _ => format!("INVALID_{}", self.0),
        }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.0, self.name())
    }
}

pub fn encode_action(action: SubAction) -> Result<ActionId, CodecError> {
    let id = match action {
        SubAction::Verdict(Verdict::NoFault) => 0,
        SubAction::Verdict(Verdict::FaultDetected) => 1,
        SubAction::Command(c) => {
            ActionId::FIRST_COMMAND + Command::ALL.iter().position(|x| *x == c).unwrap() as u16
        }
        SubAction::Parameter(Parameter::None) => 8,
        SubAction::Parameter(Parameter::Address(a))
            if (1..=netsim::MAX_ADDRESSES as u16).contains(&a) =>
        {
            ActionId::FIRST_ADDRESS + a - 1
        }
        SubAction::Parameter(Parameter::Subnet(s))
            if (1..=netsim::MAX_SUBNETS as u16).contains(&s) =>
        {
            ActionId::FIRST_SUBNET + s - 1
        }
        other => return Err(CodecError::Unencodable(other)),
    };
    Ok(ActionId(id))
}

pub fn decode_action(action: ActionId, phase: Phase) -> Result<SubAction, CodecError> {
    let legal = action.phase().ok_or(CodecError::ActionOutOfRange(action.0))?;
    if legal != phase {
        return Err(CodecError::PhaseIllegal { action: action.0, phase });
    }
    Ok(match action.0 {
        0 => SubAction::Verdict(Verdict::NoFault),
        1 => SubAction::Verdict(Verdict::FaultDetected),
        2..=7 => SubAction::Command(Command::ALL[(action.0 - ActionId::FIRST_COMMAND) as usize]),
        8 => SubAction::Parameter(Parameter::None),
        9..=71 => SubAction::Parameter(Parameter::Address(action.0 - ActionId::FIRST_ADDRESS + 1)),
        _ => SubAction::Parameter(Parameter::Subnet(action.0 - ActionId::FIRST_SUBNET + 1)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_sizes() {
        let v = Vocabulary::get();
        let sizes: Vec<usize> = (0..CATEGORY_COUNT).map(|c| v.pool_size(c).unwrap()).collect();
        assert_eq!(sizes, vec![3, 63, 32, 10, 9, 2, 3, 6, 3, 2, 2, 6]);
        assert_eq!(v.len(), sizes.iter().sum::<usize>());
        assert!(v.pool_size(12).is_none());
    }

    #[test]
    fn token_examples() {
        assert_eq!(encode_token("ip-address-1").unwrap(), (1, 0));
        assert_eq!(
            encode_token("ip-address-64"),
            Err(CodecError::UnknownToken("ip-address-64".into()))
        );
        assert_eq!(decode_token(1, 0).unwrap(), "ip-address-1");
        assert_eq!(decode_token(5, 1).unwrap(), netsim::PORT_CLOSED);
        assert_eq!(decode_token(12, 0), Err(CodecError::OutOfRange { category: 12, index: 0 }));
        assert!(decode_token(1, 63).is_err());
    }

    #[test]
    fn embed_examples() {
        assert!((embed(0, 0).unwrap() - 0.25 / 12.0).abs() < 1e-15);
        assert!((embed(0, 0).unwrap() - 0.020_833_333_333_333_33).abs() < 1e-15);
        assert!((embed(1, 0).unwrap() - (1.0 + 1.0 / 64.0) / 12.0).abs() < 1e-15);
        assert!((embed(1, 0).unwrap() - 0.084_635_416_666_666_67).abs() < 1e-15);
        assert!(embed(3, 10).is_err());
        assert!(embed(12, 0).is_err());
    }

    #[test]
    fn action_examples() {
        assert_eq!(encode_action(SubAction::Verdict(Verdict::NoFault)).unwrap(), ActionId(0));
        assert_eq!(
            encode_action(SubAction::Parameter(Parameter::Subnet(1))).unwrap(),
            ActionId(72)
        );
        assert_eq!(
            encode_action(SubAction::Parameter(Parameter::Address(17))).unwrap(),
            ActionId(25)
        );
        assert_eq!(encode_action(SubAction::Command(Command::SetIpAddress)).unwrap(), ActionId(3));
        assert!(matches!(
            decode_action(ActionId(9), Phase::Diagnose),
            Err(CodecError::PhaseIllegal { action: 9, .. })
        ));
        assert!(encode_action(SubAction::Parameter(Parameter::Address(64))).is_err());
        assert!(decode_action(ActionId(104), Phase::Parameter).is_err());
        assert_eq!(ActionId(103).name(), "PARAM_SUBNET_32");
        assert_eq!(ActionId(7).name(), "CMD_SET_VERSION_2");
    }

    #[test]
    fn observation_layout() {
        let item = InfoItem {
            key: "Device-a/Port-1/ip-address".into(),
            kind: ItemKind::IpAddress,
            device: "Device-a".into(),
            interface: Some("Port-1".into()),
            design_value: "ip-address-3".into(),
            current_value: "ip-address-5".into(),
            protocol: Protocol::Ospf,
        };
        let obs = build_observation(&item, Phase::Parameter, Some(Command::SetIpAddress)).unwrap();
        assert_eq!(obs[slot::PHASE], embed(8, 2).unwrap());
        assert_eq!(obs[slot::PENDING], embed(7, 1).unwrap());
        assert_eq!(obs[slot::DESIGN], embed(1, 2).unwrap());
        assert_eq!(obs[slot::CURRENT], embed(1, 4).unwrap());
        assert!(obs[8..].iter().all(|x| *x == 0.0));

        let routing = InfoItem { interface: None, kind: ItemKind::AutoSummary, ..item.clone() };
        let routing = InfoItem {
            design_value: "disabled".into(),
            current_value: "enabled".into(),
            ..routing
        };
        let obs = build_observation(&routing, Phase::Diagnose, None).unwrap();
        assert_eq!(obs[slot::INTERFACE], 0.0);
        assert_eq!(obs[slot::PENDING], 0.0);
        assert!(build_observation(&routing, Phase::Parameter, None).is_err());
        assert!(build_observation(&routing, Phase::Command, Some(Command::NoShutdown)).is_err());
        let bogus = InfoItem { current_value: "mystery".into(), ..routing };
        assert_eq!(
            build_observation(&bogus, Phase::Diagnose, None),
            Err(CodecError::UnknownToken("mystery".into()))
        );
    }

    #[test]
    fn vocab_json_is_stable() {
        let v = Vocabulary::get();
        let json = v.to_json();
        assert!(json.contains("\"schema\": \"netop-vocab-1\""));
        assert!(json.ends_with('\n'));
        assert_eq!(v.hash(), vocab_hash());
        assert_eq!(vocab_hash().len(), 64);
    }
}
