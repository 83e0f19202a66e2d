//! Random small-network generator, fault injector and repair oracle.
//!
//! A network is a tree of 4 to 10 devices. Every cable gets its own subnet
//! from the subnet pool and each of its two endpoints gets a distinct address
//! from that subnet's address pool. The network state is a pair of
//! configuration dictionaries keyed by [`ItemKey`] strings: the designed
//! (correct) values and the current values, which differ wherever a fault
//! was injected.
//!
//! All randomness comes from [`SimRng`] (ChaCha8 seeded through
//! `seed_from_u64`), so a `(seed, config)` pair reproduces the same network
//! on every platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Portable seeded generator used for every random draw in the simulator.
pub type SimRng = ChaCha8Rng;

pub fn sim_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const STATE_SCHEMA: &str = "netop-state-1";

/// Hard limits imposed by the token vocabulary.
pub const MAX_DEVICES: usize = 10;
pub const MAX_INTERFACES: usize = 9;
pub const MAX_SUBNETS: usize = 32;
pub const MAX_ADDRESSES: usize = 63;

pub const PORT_OPEN: &str = "open";
pub const PORT_CLOSED: &str = "closed";
pub const SUMMARY_DISABLED: &str = "disabled";
pub const SUMMARY_ENABLED: &str = "enabled";
pub const VERSION_1: &str = "version-1";
pub const VERSION_2: &str = "version-2";
pub const ABSENT: &str = "ABSENT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("instruction {command:?} cannot be applied to a {kind} item")]
    InstructionMismatch { command: Option<Command>, kind: ItemKind },
    #[error("malformed instruction: {0}")]
    MalformedInstruction(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid network state: {0}")]
    InvalidState(String),
}

pub fn device_name(i: usize) -> String {
    format!("Device-{}", (b'a' + i as u8) as char)
}

pub fn interface_name(i: usize) -> String {
    format!("Port-{}", i + 1)
}

pub fn address_token(index: u16) -> String {
    format!("ip-address-{index}")
}

pub fn subnet_token(index: u16) -> String {
    format!("ip-subnet-{index}")
}

fn parse_indexed(token: &str, prefix: &str, max: usize) -> Option<u16> {
    let digits = token.strip_prefix(prefix)?;
    if digits.starts_with('0') {
        return None;
    }
    let n: u16 = digits.parse().ok()?;
    (1..=max as u16).contains(&n).then_some(n)
}

/// 1-based address index of an `ip-address-N` token.
pub fn parse_address(token: &str) -> Option<u16> {
    parse_indexed(token, "ip-address-", MAX_ADDRESSES)
}

/// 1-based subnet index of an `ip-subnet-N` token.
pub fn parse_subnet(token: &str) -> Option<u16> {
    parse_indexed(token, "ip-subnet-", MAX_SUBNETS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub device_min: usize,
    pub device_max: usize,
    pub subnet_pool_size: usize,
    pub address_pool_size: usize,
    pub fault_probability: f64,
    pub fault_min: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            device_min: 4,
            device_max: 10,
            subnet_pool_size: 32,
            address_pool_size: 63,
            fault_probability: 0.3,
            fault_min: 1,
        }
    }
}

impl SimConfig {
    /// Reduced pools used for quick training runs.
    pub fn desk() -> Self {
        Self {
            device_min: 4,
            device_max: 6,
            subnet_pool_size: 8,
            address_pool_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |field, reason: String| Err(SimError::Config { field, reason });
        if self.device_min < 4 {
            return fail("device_min", format!("{} is below 4", self.device_min));
        }
        if self.device_max < self.device_min {
            return fail(
                "device_max",
                format!("{} is below device_min {}", self.device_max, self.device_min),
            );
        }
        if self.device_max > MAX_DEVICES {
            return fail("device_max", format!("{} exceeds {MAX_DEVICES}", self.device_max));
        }
        if self.subnet_pool_size < self.device_max - 1 || self.subnet_pool_size > MAX_SUBNETS {
            return fail(
                "subnet_pool_size",
                format!(
                    "{} must lie in [{}, {MAX_SUBNETS}]",
                    self.subnet_pool_size,
                    self.device_max - 1
                ),
            );
        }
        if !(2..=MAX_ADDRESSES).contains(&self.address_pool_size) {
            return fail(
                "address_pool_size",
                format!("{} must lie in [2, {MAX_ADDRESSES}]", self.address_pool_size),
            );
        }
        if !(0.0..=1.0).contains(&self.fault_probability) {
            return fail(
                "fault_probability",
                format!("{} is outside [0, 1]", self.fault_probability),
            );
        }
        // 24 is the item count of the smallest (4 device, OSPF) network.
        if self.fault_min == 0 || self.fault_min > 24 {
            return fail("fault_min", format!("{} must lie in [1, 24]", self.fault_min));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "RIP")]
    Rip,
    #[serde(rename = "EIGRP")]
    Eigrp,
    #[serde(rename = "OSPF")]
    Ospf,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Rip, Protocol::Eigrp, Protocol::Ospf];

    pub fn token(self) -> &'static str {
        match self {
            Protocol::Rip => "RIP",
            Protocol::Eigrp => "EIGRP",
            Protocol::Ospf => "OSPF",
        }
    }

    pub fn has_auto_summary(self) -> bool {
        matches!(self, Protocol::Rip | Protocol::Eigrp)
    }

    pub fn has_version(self) -> bool {
        self == Protocol::Rip
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub device: String,
    pub interface: String,
    /// 1-based index into the address pool of the link's subnet.
    pub address: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    /// 1-based index into the subnet pool.
    pub subnet: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDesign {
    pub devices: Vec<String>,
    pub links: Vec<Link>,
    pub protocol: Protocol,
}

impl NetworkDesign {
    /// Checks the tree, subnet and address invariants.
    pub fn check(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidState(m));
        let n = self.devices.len();
        if self.links.len() + 1 != n {
            return bad(format!("{} links for {n} devices", self.links.len()));
        }
        let pos = |d: &str| self.devices.iter().position(|x| x == d);
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut subnets = BTreeSet::new();
        let mut interfaces = BTreeSet::new();
        for link in &self.links {
            let (Some(a), Some(b)) = (pos(&link.a.device), pos(&link.b.device)) else {
                return bad("link references an unknown device".into());
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return bad("link graph has a cycle".into());
            }
            parent[ra] = rb;
            if !subnets.insert(link.subnet) {
                return bad(format!("subnet {} used twice", link.subnet));
            }
            if link.a.address == link.b.address {
                return bad(format!("link on subnet {} reuses an address", link.subnet));
            }
            for ep in [&link.a, &link.b] {
                if !interfaces.insert((ep.device.clone(), ep.interface.clone())) {
                    return bad(format!("{}/{} appears in two links", ep.device, ep.interface));
                }
            }
        }
        Ok(())
    }
}

/// Builds a random tree network. Deterministic for a fixed `(seed, cfg)`.
pub fn generate_design(seed: u64, cfg: &SimConfig) -> Result<NetworkDesign, SimError> {
    cfg.validate()?;
    let mut rng = sim_rng(seed);
    let n = rng.gen_range(cfg.device_min..=cfg.device_max);
    let devices: Vec<String> = (0..n).map(device_name).collect();

    // Random root, then attach the remaining devices one cable at a time.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut ports = vec![0usize; n];
    let mut pairs = Vec::with_capacity(n - 1);
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        let child = order[i];
        let pi = ports[parent];
        ports[parent] += 1;
        let ci = ports[child];
        ports[child] += 1;
        pairs.push(((parent, pi), (child, ci)));
    }
    let protocol = Protocol::ALL[rng.gen_range(0..3)];

    let subnets = index::sample(&mut rng, cfg.subnet_pool_size, n - 1);
    let links = pairs
        .into_iter()
        .zip(subnets)
        .map(|(((pd, pi), (cd, ci)), s)| {
            let addrs = index::sample(&mut rng, cfg.address_pool_size, 2);
            Link {
                a: Endpoint {
                    device: devices[pd].clone(),
                    interface: interface_name(pi),
                    address: addrs.index(0) as u16 + 1,
                },
                b: Endpoint {
                    device: devices[cd].clone(),
                    interface: interface_name(ci),
                    address: addrs.index(1) as u16 + 1,
                },
                subnet: s as u16 + 1,
            }
        })
        .collect();
    Ok(NetworkDesign { devices, links, protocol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    PortStatus,
    IpAddress,
    IpSubnet,
    NetworkStatement,
    AutoSummary,
    ProtocolVersion,
}

impl ItemKind {
    pub const ALL: [ItemKind; 6] = [
        ItemKind::PortStatus,
        ItemKind::IpAddress,
        ItemKind::IpSubnet,
        ItemKind::NetworkStatement,
        ItemKind::AutoSummary,
        ItemKind::ProtocolVersion,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ItemKind::PortStatus => "port-status",
            ItemKind::IpAddress => "ip-address",
            ItemKind::IpSubnet => "ip-subnet",
            ItemKind::NetworkStatement => "network-statement",
            ItemKind::AutoSummary => "auto-summary",
            ItemKind::ProtocolVersion => "protocol-version",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == s)
    }

    pub fn is_interface_level(self) -> bool {
        matches!(self, ItemKind::PortStatus | ItemKind::IpAddress | ItemKind::IpSubnet)
    }

    /// The only fault kind that can be observed at this item kind.
    pub fn fault_kind(self) -> FaultKind {
        match self {
            ItemKind::PortStatus => FaultKind::PortClosed,
            ItemKind::IpAddress => FaultKind::IncorrectIpAddress,
            ItemKind::IpSubnet => FaultKind::IncorrectIpSubnet,
            ItemKind::NetworkStatement => FaultKind::MissingIpSubnet,
            ItemKind::AutoSummary => FaultKind::AutoSummaryEnabled,
            ItemKind::ProtocolVersion => FaultKind::WrongProtocolVersion,
        }
    }

    /// The repair command for this item kind.
    pub fn repair_command(self) -> Command {
        match self {
            ItemKind::PortStatus => Command::NoShutdown,
            ItemKind::IpAddress => Command::SetIpAddress,
            ItemKind::IpSubnet => Command::SetIpSubnet,
            ItemKind::NetworkStatement => Command::AddNetworkStatement,
            ItemKind::AutoSummary => Command::NoAutoSummary,
            ItemKind::ProtocolVersion => Command::SetVersion2,
        }
    }

    /// Whether `token` is a legal value (design or current) for this kind.
    pub fn accepts_value(self, token: &str) -> bool {
        match self {
            ItemKind::PortStatus => token == PORT_OPEN || token == PORT_CLOSED,
            ItemKind::IpAddress => parse_address(token).is_some(),
            ItemKind::IpSubnet => parse_subnet(token).is_some(),
            ItemKind::NetworkStatement => token == ABSENT || parse_subnet(token).is_some(),
            ItemKind::AutoSummary => token == SUMMARY_DISABLED || token == SUMMARY_ENABLED,
            ItemKind::ProtocolVersion => token == VERSION_1 || token == VERSION_2,
        }
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Location of one configuration item, rendered as a `/`-separated string:
///
/// * `Device-a/Port-1/port-status` (also `ip-address`, `ip-subnet`)
/// * `Device-a/network-statement/ip-subnet-3`
/// * `Device-a/auto-summary`, `Device-a/protocol-version`
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemKey {
    pub device: String,
    pub interface: Option<String>,
    pub kind: ItemKind,
    /// Set only for network statements.
    pub subnet: Option<u16>,
}

impl ItemKey {
    pub fn interface(device: &str, interface: &str, kind: ItemKind) -> Self {
        Self { device: device.into(), interface: Some(interface.into()), kind, subnet: None }
    }

    pub fn routing(device: &str, kind: ItemKind, subnet: Option<u16>) -> Self {
        Self { device: device.into(), interface: None, kind, subnet }
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.interface, self.subnet) {
            (Some(i), _) => write!(f, "{}/{}/{}", self.device, i, self.kind),
            (None, Some(s)) => write!(f, "{}/{}/{}", self.device, self.kind, subnet_token(s)),
            (None, None) => write!(f, "{}/{}", self.device, self.kind),
        }
    }
}

impl FromStr for ItemKey {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SimError::InvalidState(format!("malformed item key `{s}`"));
        let parts: Vec<&str> = s.split('/').collect();
        let device = parts[0];
        if !(0..MAX_DEVICES).any(|i| device_name(i) == device) {
            return Err(err());
        }
        match parts.as_slice() {
            [_, second, third] => {
                if let Some(kind) = ItemKind::from_token(third) {
                    if !kind.is_interface_level()
                        || !(0..MAX_INTERFACES).any(|i| interface_name(i) == *second)
                    {
                        return Err(err());
                    }
                    Ok(ItemKey::interface(device, second, kind))
                } else if *second == ItemKind::NetworkStatement.token() {
                    let subnet = parse_subnet(third).ok_or_else(err)?;
                    Ok(ItemKey::routing(device, ItemKind::NetworkStatement, Some(subnet)))
                } else {
                    Err(err())
                }
            }
            [_, kind] => match ItemKind::from_token(kind) {
                Some(k @ (ItemKind::AutoSummary | ItemKind::ProtocolVersion)) => {
                    Ok(ItemKey::routing(device, k, None))
                }
                _ => Err(err()),
            },
            _ => Err(err()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    PortClosed,
    IncorrectIpAddress,
    IncorrectIpSubnet,
    MissingIpSubnet,
    AutoSummaryEnabled,
    WrongProtocolVersion,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::PortClosed,
        FaultKind::IncorrectIpAddress,
        FaultKind::IncorrectIpSubnet,
        FaultKind::MissingIpSubnet,
        FaultKind::AutoSummaryEnabled,
        FaultKind::WrongProtocolVersion,
    ];

    pub fn legal_under(self, protocol: Protocol) -> bool {
        match self {
            FaultKind::AutoSummaryEnabled => protocol.has_auto_summary(),
            FaultKind::WrongProtocolVersion => protocol.has_version(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub device: String,
    pub interface: Option<String>,
    pub subnet: Option<u16>,
    /// Injected pool index for the two incorrect-value kinds.
    pub wrong_value: Option<String>,
}

/// One network-information slice: a design value and the matching current value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoItem {
    pub key: String,
    pub kind: ItemKind,
    pub device: String,
    pub interface: Option<String>,
    pub design_value: String,
    pub current_value: String,
    pub protocol: Protocol,
}

impl InfoItem {
    pub fn is_faulted(&self) -> bool {
        self.design_value != self.current_value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub design: BTreeMap<String, String>,
    pub current: BTreeMap<String, String>,
    pub protocol: Protocol,
    pub faults_remaining: usize,
}

impl NetworkState {
    /// The fault-free state of a design.
    pub fn pristine(design: &NetworkDesign) -> Self {
        let mut map = BTreeMap::new();
        for link in &design.links {
            for ep in [&link.a, &link.b] {
                let put = |m: &mut BTreeMap<String, String>, kind, v: String| {
                    m.insert(ItemKey::interface(&ep.device, &ep.interface, kind).to_string(), v);
                };
                put(&mut map, ItemKind::PortStatus, PORT_OPEN.into());
                put(&mut map, ItemKind::IpAddress, address_token(ep.address));
                put(&mut map, ItemKind::IpSubnet, subnet_token(link.subnet));
                let key = ItemKey::routing(&ep.device, ItemKind::NetworkStatement, Some(link.subnet));
                map.insert(key.to_string(), subnet_token(link.subnet));
            }
        }
        for device in &design.devices {
            if design.protocol.has_auto_summary() {
                let key = ItemKey::routing(device, ItemKind::AutoSummary, None);
                map.insert(key.to_string(), SUMMARY_DISABLED.into());
            }
            if design.protocol.has_version() {
                let key = ItemKey::routing(device, ItemKind::ProtocolVersion, None);
                map.insert(key.to_string(), VERSION_2.into());
            }
        }
        Self { current: map.clone(), design: map, protocol: design.protocol, faults_remaining: 0 }
    }

    pub fn count_faults(&self) -> usize {
        self.design.iter().filter(|(k, v)| self.current.get(*k) != Some(*v)).count()
    }

    pub fn is_repaired(&self) -> bool {
        self.current == self.design
    }

    pub fn item(&self, key: &str) -> Result<InfoItem, SimError> {
        let parsed: ItemKey = key.parse()?;
        let design_value = self
            .design
            .get(key)
            .ok_or_else(|| SimError::UnknownItem(key.to_string()))?;
        let current_value = self
            .current
            .get(key)
            .ok_or_else(|| SimError::UnknownItem(key.to_string()))?;
        Ok(InfoItem {
            key: key.to_string(),
            kind: parsed.kind,
            device: parsed.device,
            interface: parsed.interface,
            design_value: design_value.clone(),
            current_value: current_value.clone(),
            protocol: self.protocol,
        })
    }

    /// Applies one composed device instruction to `item`. The state is left
    /// untouched when the instruction does not fit the item.
    pub fn apply_instruction(
        &mut self,
        item: &InfoItem,
        instr: &DeviceInstruction,
    ) -> Result<(), SimError> {
        instr.check()?;
        let Some(command) = instr.command else {
            return Ok(());
        };
        if !self.current.contains_key(&item.key) {
            return Err(SimError::UnknownItem(item.key.clone()));
        }
        if command.item_kind() != item.kind {
            return Err(SimError::InstructionMismatch { command: Some(command), kind: item.kind });
        }
        let value = match (command, instr.parameter) {
            (Command::NoShutdown, _) => PORT_OPEN.to_string(),
            (Command::NoAutoSummary, _) => SUMMARY_DISABLED.to_string(),
            (Command::SetVersion2, _) => VERSION_2.to_string(),
            (Command::SetIpAddress, Parameter::Address(a)) => address_token(a),
            (Command::SetIpSubnet | Command::AddNetworkStatement, Parameter::Subnet(s)) => {
                subnet_token(s)
            }
            _ => unreachable!("checked by DeviceInstruction::check"),
        };
        self.current.insert(item.key.clone(), value);
        self.faults_remaining = self.count_faults();
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = StateDoc {
            current: self.current.clone(),
            design: self.design.clone(),
            faults_remaining: self.faults_remaining,
            protocol: self.protocol,
            schema: STATE_SCHEMA.to_string(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("state serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let doc: StateDoc = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        if doc.schema != STATE_SCHEMA {
            return Err(SimError::InvalidState(format!("unsupported schema `{}`", doc.schema)));
        }
        if !doc.design.keys().eq(doc.current.keys()) {
            return Err(SimError::InvalidState("design and current key sets differ".into()));
        }
        for (key, design_value) in &doc.design {
            let parsed: ItemKey = key.parse()?;
            let current_value = &doc.current[key];
            let legal = parsed.kind.accepts_value(design_value)
                && design_value != ABSENT
                && parsed.kind.accepts_value(current_value);
            if !legal {
                return Err(SimError::InvalidState(format!("illegal value at `{key}`")));
            }
        }
        let state = NetworkState {
            design: doc.design,
            current: doc.current,
            protocol: doc.protocol,
            faults_remaining: doc.faults_remaining,
        };
        if state.count_faults() != state.faults_remaining {
            return Err(SimError::InvalidState(format!(
                "faults_remaining is {} but {} items differ",
                state.faults_remaining,
                state.count_faults()
            )));
        }
        Ok(state)
    }
}

/// Maps a serde_json error position to a byte offset in `text`.
pub(crate) fn json_error(text: &str, e: &serde_json::Error) -> SimError {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len();
    }
    SimError::Parse { offset, message: e.to_string() }
}

// Field order is alphabetical so the emitted JSON keys are sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    current: BTreeMap<String, String>,
    design: BTreeMap<String, String>,
    faults_remaining: usize,
    protocol: Protocol,
    schema: String,
}

/// Injects faults into the pristine state of `design`.
///
/// Every item is faulted independently with `fault_probability`; when fewer
/// than `fault_min` faults come out, healthy items are picked uniformly until
/// the floor is met.
pub fn inject_faults(
    design: &NetworkDesign,
    seed: u64,
    cfg: &SimConfig,
) -> Result<(NetworkState, Vec<Fault>), SimError> {
    cfg.validate()?;
    let mut state = NetworkState::pristine(design);
    let items = enumerate_items(&state);
    let mut rng = sim_rng(seed);

    let mut chosen: Vec<bool> =
        items.iter().map(|_| rng.gen_bool(cfg.fault_probability)).collect();
    let mut count = chosen.iter().filter(|c| **c).count();
    let floor = cfg.fault_min.min(items.len());
    while count < floor {
        let healthy: Vec<usize> = (0..items.len()).filter(|i| !chosen[*i]).collect();
        chosen[healthy[rng.gen_range(0..healthy.len())]] = true;
        count += 1;
    }

    let other_index = |rng: &mut SimRng, design: u16, pool: usize| -> u16 {
        let k = rng.gen_range(1..pool as u16);
        if k >= design {
            k + 1
        } else {
            k
        }
    };

    let mut faults = Vec::with_capacity(count);
    for (item, _) in items.iter().zip(&chosen).filter(|(_, c)| **c) {
        let key: ItemKey = item.key.parse()?;
        let (value, wrong_value) = match item.kind {
            ItemKind::PortStatus => (PORT_CLOSED.to_string(), None),
            ItemKind::IpAddress => {
                let d = parse_address(&item.design_value).expect("design address");
                let v = address_token(other_index(&mut rng, d, cfg.address_pool_size));
                (v.clone(), Some(v))
            }
            ItemKind::IpSubnet => {
                let d = parse_subnet(&item.design_value).expect("design subnet");
                let v = subnet_token(other_index(&mut rng, d, cfg.subnet_pool_size));
                (v.clone(), Some(v))
            }
            ItemKind::NetworkStatement => (ABSENT.to_string(), None),
            ItemKind::AutoSummary => (SUMMARY_ENABLED.to_string(), None),
            ItemKind::ProtocolVersion => (VERSION_1.to_string(), None),
        };
        state.current.insert(item.key.clone(), value);
        faults.push(Fault {
            kind: item.kind.fault_kind(),
            device: key.device,
            interface: key.interface,
            subnet: key.subnet,
            wrong_value,
        });
    }
    state.faults_remaining = state.count_faults();
    debug_assert_eq!(state.faults_remaining, faults.len());
    Ok((state, faults))
}

/// Lists every information item in inspection order: first the interface
/// items of all devices (port status, address, subnet per interface), then
/// the routing items of all devices (network statements by subnet index,
/// auto-summary, protocol version).
pub fn enumerate_items(state: &NetworkState) -> Vec<InfoItem> {
    let mut keyed: Vec<(ItemKey, &String)> = state
        .design
        .keys()
        .map(|k| (k.parse::<ItemKey>().expect("state keys are validated"), k))
        .collect();
    keyed.sort_by(|(a, _), (b, _)| {
        let pass = |k: &ItemKey| !k.kind.is_interface_level();
        (pass(a), &a.device, &a.interface, a.kind, a.subnet)
            .cmp(&(pass(b), &b.device, &b.interface, b.kind, b.subnet))
    });
    keyed
        .into_iter()
        .map(|(k, raw)| InfoItem {
            key: raw.clone(),
            kind: k.kind,
            device: k.device,
            interface: k.interface,
            design_value: state.design[raw].clone(),
            current_value: state.current[raw].clone(),
            protocol: state.protocol,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    NoFault,
    FaultDetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Command {
    NoShutdown,
    SetIpAddress,
    SetIpSubnet,
    AddNetworkStatement,
    NoAutoSummary,
    SetVersion2,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::NoShutdown,
        Command::SetIpAddress,
        Command::SetIpSubnet,
        Command::AddNetworkStatement,
        Command::NoAutoSummary,
        Command::SetVersion2,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Command::NoShutdown => "no-shutdown",
            Command::SetIpAddress => "set-ip-address",
            Command::SetIpSubnet => "set-ip-subnet",
            Command::AddNetworkStatement => "add-network-statement",
            Command::NoAutoSummary => "no-auto-summary",
            Command::SetVersion2 => "set-version-2",
        }
    }

    pub fn item_kind(self) -> ItemKind {
        match self {
            Command::NoShutdown => ItemKind::PortStatus,
            Command::SetIpAddress => ItemKind::IpAddress,
            Command::SetIpSubnet => ItemKind::IpSubnet,
            Command::AddNetworkStatement => ItemKind::NetworkStatement,
            Command::NoAutoSummary => ItemKind::AutoSummary,
            Command::SetVersion2 => ItemKind::ProtocolVersion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Parameter {
    None,
    Address(u16),
    Subnet(u16),
}

/// One sub-step output: a verdict, a command or a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubAction {
    Verdict(Verdict),
    Command(Command),
    Parameter(Parameter),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInstruction {
    pub verdict: Verdict,
    pub command: Option<Command>,
    pub parameter: Parameter,
}

impl DeviceInstruction {
    pub fn no_fault() -> Self {
        Self { verdict: Verdict::NoFault, command: None, parameter: Parameter::None }
    }

    pub fn repair(command: Command, parameter: Parameter) -> Self {
        Self { verdict: Verdict::FaultDetected, command: Some(command), parameter }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::MalformedInstruction(m.to_string()));
        match (self.verdict, self.command, self.parameter) {
            (Verdict::NoFault, None, Parameter::None) => Ok(()),
            (Verdict::NoFault, _, _) => bad("a no-fault verdict carries no command"),
            (Verdict::FaultDetected, None, _) => bad("a detected fault needs a command"),
            (Verdict::FaultDetected, Some(c), p) => match (c, p) {
                (Command::SetIpAddress, Parameter::Address(a))
                    if (1..=MAX_ADDRESSES as u16).contains(&a) =>
                {
                    Ok(())
                }
                (Command::SetIpSubnet | Command::AddNetworkStatement, Parameter::Subnet(s))
                    if (1..=MAX_SUBNETS as u16).contains(&s) =>
                {
                    Ok(())
                }
                (
                    Command::NoShutdown | Command::NoAutoSummary | Command::SetVersion2,
                    Parameter::None,
                ) => Ok(()),
                _ => bad("parameter does not fit the command"),
            },
        }
    }
}

/// The correct sub-action sequence for one item.
pub fn oracle_sequence(item: &InfoItem) -> Vec<SubAction> {
    if !item.is_faulted() {
        return vec![SubAction::Verdict(Verdict::NoFault)];
    }
    let command = item.kind.repair_command();
    vec![
        SubAction::Verdict(Verdict::FaultDetected),
        SubAction::Command(command),
        SubAction::Parameter(repair_parameter(item)),
    ]
}

/// The parameter that restores `item` to its design value.
pub fn repair_parameter(item: &InfoItem) -> Parameter {
    match item.kind {
        ItemKind::IpAddress => Parameter::Address(parse_address(&item.design_value).expect("address")),
        ItemKind::IpSubnet | ItemKind::NetworkStatement => {
            Parameter::Subnet(parse_subnet(&item.design_value).expect("subnet"))
        }
        _ => Parameter::None,
    }
}

pub fn oracle_script(state: &NetworkState) -> Vec<(InfoItem, Vec<SubAction>)> {
    enumerate_items(state)
        .into_iter()
        .map(|item| {
            let seq = oracle_sequence(&item);
            (item, seq)
        })
        .collect()
}

/// Composes a full sub-action sequence into one instruction.
pub fn compose(seq: &[SubAction]) -> Result<DeviceInstruction, SimError> {
    let instr = match seq {
        [SubAction::Verdict(Verdict::NoFault)] => DeviceInstruction::no_fault(),
        [SubAction::Verdict(Verdict::FaultDetected), SubAction::Command(c), SubAction::Parameter(p)] => {
            DeviceInstruction::repair(*c, *p)
        }
        _ => return Err(SimError::MalformedInstruction(format!("{seq:?}"))),
    };
    instr.check()?;
    Ok(instr)
}
