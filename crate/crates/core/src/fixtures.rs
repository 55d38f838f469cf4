//! Seeded synthetic corpora with the same schema as real control catalogs and
//! benchmark checks. Each control owns three small vocabularies: the formal
//! terms of its control text, the terms benchmark-style checks use for it, and
//! the terms operator-style rules use for it. The last two overlap only
//! partly, so a model trained on benchmark checks has something to learn from
//! operator feedback.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, RegulationControl, StopwordList, TechspecCheck};

pub const NIST_REGULATION: &str = "NIST-800-53-v4";
pub const HIPAA_REGULATION: &str = "HIPAA";

pub const DISK_ENCRYPTION_CHECK: &str = "Check whether data disks are encrypted";
pub const PASSWORD_UPPERCASE_CHECK: &str = "Check whether password policy requires at least one uppercase letter";
pub const KUBERNETES_ADMINS_CHECK: &str = "Ensure no more than 3 user administrators are defined for Kubernetes containers";

const FAMILIES: [(&str, &str, [&str; 5]); 17] = [
    ("AC", "ACCESS CONTROL", ["access", "account", "privilege", "session", "permission"]),
    ("AT", "AWARENESS AND TRAINING", ["training", "awareness", "literacy", "role", "exercise"]),
    ("AU", "AUDIT AND ACCOUNTABILITY", ["audit", "log", "event", "record", "timestamp"]),
    ("CA", "SECURITY ASSESSMENT AND AUTHORIZATION", ["assessment", "authorization", "monitoring", "interconnection", "plan"]),
    ("CM", "CONFIGURATION MANAGEMENT", ["configuration", "baseline", "inventory", "change", "component"]),
    ("CP", "CONTINGENCY PLANNING", ["backup", "contingency", "recovery", "alternate", "restore"]),
    ("IA", "IDENTIFICATION AND AUTHENTICATION", ["authentication", "identifier", "credential", "authenticator", "token"]),
    ("IR", "INCIDENT RESPONSE", ["incident", "response", "reporting", "handling", "tracking"]),
    ("MA", "MAINTENANCE", ["maintenance", "tools", "remote", "diagnostic", "repair"]),
    ("MP", "MEDIA PROTECTION", ["media", "sanitization", "marking", "transport", "removable"]),
    ("PE", "PHYSICAL AND ENVIRONMENTAL PROTECTION", ["physical", "facility", "visitor", "entry", "power"]),
    ("PL", "PLANNING", ["planning", "rules", "behavior", "architecture", "privacy"]),
    ("PS", "PERSONNEL SECURITY", ["personnel", "screening", "termination", "transfer", "sanctions"]),
    ("RA", "RISK ASSESSMENT", ["risk", "vulnerability", "scanning", "categorization", "threat"]),
    ("SA", "SYSTEM AND SERVICES ACQUISITION", ["acquisition", "developer", "lifecycle", "supply", "documentation"]),
    ("SC", "SYSTEM AND COMMUNICATIONS PROTECTION", ["boundary", "communications", "network", "transmission", "protection"]),
    ("SI", "SYSTEM AND INFORMATION INTEGRITY", ["integrity", "malicious", "flaw", "remediation", "alerts"]),
];

const BACKGROUND: [&str; 16] = [
    "system", "configured", "setting", "enabled", "server", "service", "policy", "default", "value", "file",
    "users", "application", "host", "platform", "daemon", "operating",
];

/// Controls whose full text and term sets are fixed rather than generated.
struct KnownControl {
    control_id: &'static str,
    title: &'static str,
    text: &'static str,
    benchmark_terms: &'static [&'static str],
    operator_terms: &'static [&'static str],
}

const KNOWN_CONTROLS: [KnownControl; 4] = [
    KnownControl {
        control_id: "IA-5(1)",
        title: "AUTHENTICATOR MANAGEMENT | PASSWORD-BASED AUTHENTICATION",
        text: "Enforces at least the following number of changed characters when new passwords are created: \
               [Assignment: organization-defined number]",
        benchmark_terms: &["password", "uppercase", "lowercase", "characters", "complexity", "length", "numeric"],
        operator_terms: &["password", "pwquality", "ucredit", "lcredit", "minlen", "dcredit"],
    },
    KnownControl {
        control_id: "AC-6",
        title: "LEAST PRIVILEGE",
        text: "The organization employs the principle of least privilege, allowing only authorized accesses for \
               users (or processes acting on behalf of users) which are necessary to accomplish assigned tasks in \
               accordance with organizational missions and business functions.",
        benchmark_terms: &["privilege", "least", "administrators", "administrative", "root", "sudo", "elevated"],
        operator_terms: &["privileged", "rolebinding", "clusterrole", "administrators", "wildcard", "escalation"],
    },
    KnownControl {
        control_id: "SC-28",
        title: "PROTECTION OF INFORMATION AT REST",
        text: "The information system protects the [Selection (one or more): confidentiality; integrity] of \
               [Assignment: organization-defined information at rest].",
        benchmark_terms: &["encrypted", "disks", "rest", "storage", "volumes", "data", "unencrypted"],
        operator_terms: &["etcd", "encryption", "provider", "persistent", "volumes", "rest"],
    },
    KnownControl {
        control_id: "SC-13",
        title: "CRYPTOGRAPHIC PROTECTION",
        text: "The information system implements [Assignment: organization-defined cryptographic uses and type of \
               cryptography required for each use] in accordance with applicable federal laws, Executive Orders, \
               directives, policies, regulations, and standards.",
        benchmark_terms: &["cryptographic", "fips", "encrypted", "algorithms", "cipher", "keys", "disks"],
        operator_terms: &["fips", "crypto", "policies", "modules", "cipher", "openssl"],
    },
];

/// Hand-written HIPAA technical safeguards with benchmark-style terms.
const HIPAA_CONTROLS: [(&str, &str, &str, &str, [&str; 5]); 9] = [
    ("164.312(a)(1)", "164.312(a)", "Access control",
     "Implement technical policies and procedures that allow access only to persons or software programs granted access rights.",
     ["access", "rights", "granted", "permissions", "restricted"]),
    ("164.312(a)(2)(i)", "164.312(a)", "Unique user identification",
     "Assign a unique name or number for identifying and tracking user identity.",
     ["unique", "identification", "shared", "accounts", "identity"]),
    ("164.312(a)(2)(ii)", "164.312(a)", "Emergency access procedure",
     "Establish procedures for obtaining necessary electronic protected health information during an emergency.",
     ["emergency", "breakglass", "procedure", "obtaining", "override"]),
    ("164.312(a)(2)(iii)", "164.312(a)", "Automatic logoff",
     "Implement electronic procedures that terminate an electronic session after a predetermined time of inactivity.",
     ["logoff", "inactivity", "timeout", "session", "idle"]),
    ("164.312(a)(2)(iv)", "164.312(a)", "Encryption and decryption",
     "Implement a mechanism to encrypt and decrypt electronic protected health information.",
     ["encrypted", "disks", "decrypt", "encryption", "data"]),
    ("164.312(b)", "164.312(b)", "Audit controls",
     "Implement hardware, software, and procedural mechanisms that record and examine activity in information systems.",
     ["audit", "activity", "logging", "examine", "trail"]),
    ("164.312(c)(1)", "164.312(c)", "Integrity",
     "Implement policies and procedures to protect electronic protected health information from improper alteration or destruction.",
     ["integrity", "alteration", "tampering", "checksum", "destruction"]),
    ("164.312(d)", "164.312(d)", "Person or entity authentication",
     "Implement procedures to verify that a person or entity seeking access is the one claimed.",
     ["authentication", "multifactor", "verify", "claimed", "mfa"]),
    ("164.312(e)(1)", "164.312(e)", "Transmission security",
     "Implement technical security measures to guard against unauthorized access to data transmitted over a network.",
     ["transmission", "tls", "transit", "network", "transmitted"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub controls: usize,
    pub checks: usize,
    pub feedback_pool: usize,
    pub feedback_eval: usize,
    pub hipaa_checks: usize,
    pub multilabel_fraction: f64,
    pub noise: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 20_201_020,
            controls: 200,
            checks: 2000,
            feedback_pool: 360,
            feedback_eval: 150,
            hipaa_checks: 90,
            multilabel_fraction: 0.3,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub nist_controls: Vec<RegulationControl>,
    pub hipaa_controls: Vec<RegulationControl>,
    /// Benchmark-style training checks labelled against the NIST catalog.
    pub checks: Vec<TechspecCheck>,
    /// Operator-style rules fed back as reviewer verdicts.
    pub feedback_pool: Vec<TechspecCheck>,
    /// Held-out operator-style rules for measuring the effect of feedback.
    pub feedback_eval: Vec<TechspecCheck>,
    pub hipaa_checks: Vec<TechspecCheck>,
}

pub const FIXTURE_FILES: [&str; 6] = [
    "nist_controls.jsonl",
    "hipaa_controls.jsonl",
    "checks.jsonl",
    "feedback_pool.jsonl",
    "feedback_eval.jsonl",
    "hipaa_checks.jsonl",
];

impl Fixtures {
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fn save<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            write_jsonl(items, &mut w)?;
            w.flush()
        }
        save(&dir.join(FIXTURE_FILES[0]), &self.nist_controls)?;
        save(&dir.join(FIXTURE_FILES[1]), &self.hipaa_controls)?;
        save(&dir.join(FIXTURE_FILES[2]), &self.checks)?;
        save(&dir.join(FIXTURE_FILES[3]), &self.feedback_pool)?;
        save(&dir.join(FIXTURE_FILES[4]), &self.feedback_eval)?;
        save(&dir.join(FIXTURE_FILES[5]), &self.hipaa_checks)?;
        Ok(())
    }
}

struct ControlVocab {
    control_id: String,
    family: usize,
    formal: Vec<String>,
    benchmark: Vec<String>,
    operator: Vec<String>,
    partner: Option<usize>,
}

struct WordMint {
    used: HashSet<String>,
    stopwords: StopwordList,
}

impl WordMint {
    fn new() -> Self {
        let mut used: HashSet<String> = BACKGROUND.iter().map(|s| s.to_string()).collect();
        for (_, _, words) in FAMILIES {
            used.extend(words.iter().map(|s| s.to_string()));
        }
        for k in &KNOWN_CONTROLS {
            used.extend(k.benchmark_terms.iter().chain(k.operator_terms).map(|s| s.to_string()));
        }
        WordMint {
            used,
            stopwords: StopwordList::english(),
        }
    }

    fn mint(&mut self, rng: &mut ChaCha8Rng) -> String {
        const ONSET: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "tr", "st"];
        const VOWEL: [&str; 5] = ["a", "e", "i", "o", "u"];
        const CODA: [&str; 6] = ["", "n", "r", "s", "x", "l"];
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSET.choose(rng).unwrap());
                w.push_str(VOWEL.choose(rng).unwrap());
            }
            w.push_str(CODA.choose(rng).unwrap());
            if !self.stopwords.contains(&w) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String], n: usize) -> Vec<&'a str> {
    words.choose_multiple(rng, n.min(words.len())).map(String::as_str).collect()
}

fn sentence(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s.replace_range(..1, &first.to_uppercase());
    }
    s
}

fn control_ids(rng: &mut ChaCha8Rng, total: usize) -> Vec<(usize, String)> {
    let per_family = total / FAMILIES.len();
    let extra = total % FAMILIES.len();
    let mut ids = Vec::new();
    for (f, (code, _, _)) in FAMILIES.iter().enumerate() {
        let count = per_family + usize::from(f < extra);
        let required: Vec<u32> = KNOWN_CONTROLS
            .iter()
            .filter_map(|k| k.control_id.strip_prefix(&format!("{code}-")))
            .filter_map(|n| n.parse().ok())
            .collect();
        let mut numbers: BTreeSet<u32> = required.into_iter().collect();
        let mut candidates: Vec<u32> = (1..=30).filter(|n| !numbers.contains(n)).collect();
        candidates.shuffle(rng);
        numbers.extend(candidates.into_iter().take(count.saturating_sub(numbers.len())));
        ids.extend(numbers.into_iter().map(|n| (f, format!("{code}-{n}"))));
    }
    ids
}

fn build_vocab(rng: &mut ChaCha8Rng, config: &FixtureConfig) -> Vec<ControlVocab> {
    let mut mint = WordMint::new();
    // IA-5(1) is an enhancement and takes one slot of the requested total.
    let mut ids = control_ids(rng, config.controls.saturating_sub(1));
    let ia = FAMILIES.iter().position(|f| f.0 == "IA").unwrap();
    ids.push((ia, "IA-5(1)".to_string()));
    ids.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| natural_key(&a.1).cmp(&natural_key(&b.1))));
    let mut vocab: Vec<ControlVocab> = ids
        .into_iter()
        .map(|(family, control_id)| {
            if let Some(k) = KNOWN_CONTROLS.iter().find(|k| k.control_id == control_id) {
                let owned = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
                return ControlVocab {
                    control_id,
                    family,
                    formal: Vec::new(),
                    benchmark: owned(k.benchmark_terms),
                    operator: owned(k.operator_terms),
                    partner: None,
                };
            }
            let formal: Vec<String> = (0..5).map(|_| mint.mint(rng)).collect();
            let mut benchmark: Vec<String> = formal[..2].to_vec();
            benchmark.extend((0..5).map(|_| mint.mint(rng)));
            let mut operator: Vec<String> = benchmark[1..3].to_vec();
            operator.extend((0..4).map(|_| mint.mint(rng)));
            ControlVocab {
                control_id,
                family,
                formal,
                benchmark,
                operator,
                partner: None,
            }
        })
        .collect();
    assign_partners(&mut vocab);
    vocab
}

fn natural_key(id: &str) -> (String, u32, String) {
    let (prefix, rest) = id.split_once('-').unwrap_or((id, ""));
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let suffix = rest[digits.len()..].to_string();
    (prefix.to_string(), digits.parse().unwrap_or(0), suffix)
}

fn nist_control(v: &ControlVocab, rng: &mut ChaCha8Rng) -> RegulationControl {
    let (code, family_name, family_words) = FAMILIES[v.family];
    if let Some(k) = KNOWN_CONTROLS.iter().find(|k| k.control_id == v.control_id) {
        return RegulationControl {
            regulation_id: NIST_REGULATION.into(),
            control_id: v.control_id.clone(),
            family: code.into(),
            title: k.title.into(),
            text: k.text.split_whitespace().collect::<Vec<_>>().join(" "),
        };
    }
    let fam: Vec<&str> = family_words.choose_multiple(rng, 2).copied().collect();
    let f = &v.formal;
    let text = format!(
        "The organization {} {} {} for {} {} and {} {} in accordance with {} policy.",
        fam[0], f[0], f[1], f[2], fam[1], f[3], f[4], family_name.to_lowercase()
    );
    RegulationControl {
        regulation_id: NIST_REGULATION.into(),
        control_id: v.control_id.clone(),
        family: code.into(),
        title: format!("{} {}", fam[0], f[0]).to_uppercase(),
        text,
    }
}

fn benchmark_check(
    idx: usize,
    targets: &[&ControlVocab],
    vocab: &[ControlVocab],
    config: &FixtureConfig,
    rng: &mut ChaCha8Rng,
) -> TechspecCheck {
    let mut terms: Vec<&str> = Vec::new();
    for v in targets {
        let n = rng.gen_range(3..=4);
        terms.extend(pick(rng, &v.benchmark, n));
        terms.extend(FAMILIES[v.family].2.choose_multiple(rng, 1));
    }
    if rng.gen_bool(config.noise) {
        let other = vocab.choose(rng).unwrap();
        terms.extend(pick(rng, &other.benchmark, 1));
    }
    let bg: Vec<&str> = BACKGROUND.choose_multiple(rng, 3).copied().collect();
    terms.shuffle(rng);
    let split = terms.len().div_ceil(2);
    let (head, tail) = terms.split_at(split);
    let stig = idx % 3 != 2;
    let title = match rng.gen_range(0..3) {
        0 => format!("The {} must {} {}.", bg[0], head.join(" "), bg[1]),
        1 => format!("Ensure {} is {} for {}", head.join(" "), bg[1], bg[2]),
        _ => sentence(&[&["Verify"], head, &[bg[0]]].concat()),
    };
    let description = if rng.gen_bool(0.7) {
        format!("Without {} the {} may be exposed to {}.", tail.join(" "), bg[2], bg[0])
    } else {
        String::new()
    };
    let fix = if rng.gen_bool(0.5) {
        format!("Configure the {} to {}.", bg[0], terms.join(" "))
    } else {
        String::new()
    };
    TechspecCheck {
        check_id: if stig {
            format!("V-{}", 200_000 + idx)
        } else {
            format!("CIS-{}.{}.{}", idx / 100 + 1, (idx / 10) % 10 + 1, idx % 10 + 1)
        },
        title,
        description,
        rationale: String::new(),
        fix,
        source: if stig { "STIG" } else { "CIS" }.into(),
        labels: targets.iter().map(|v| v.control_id.clone()).collect(),
    }
}

fn operator_rule(idx: usize, prefix: &str, targets: &[&ControlVocab], rng: &mut ChaCha8Rng) -> TechspecCheck {
    let mut terms: Vec<&str> = Vec::new();
    for v in targets {
        let n = rng.gen_range(3..=4);
        terms.extend(pick(rng, &v.operator, n));
    }
    terms.shuffle(rng);
    let bg = BACKGROUND.choose(rng).unwrap();
    let title = match rng.gen_range(0..2) {
        0 => sentence(&[&["Ensure"], &terms[..], &[bg]].concat()),
        _ => format!("{} rule for {}", sentence(&terms), bg),
    };
    TechspecCheck {
        check_id: format!("{prefix}-{idx:04}"),
        title,
        description: String::new(),
        rationale: String::new(),
        fix: String::new(),
        source: "compliance-operator".into(),
        labels: targets.iter().map(|v| v.control_id.clone()).collect(),
    }
}

fn choose_targets<'a>(vocab: &'a [ControlVocab], config: &FixtureConfig, rng: &mut ChaCha8Rng, first: usize) -> Vec<&'a ControlVocab> {
    let a = &vocab[first];
    match a.partner {
        Some(p) if rng.gen_bool(config.multilabel_fraction) => vec![a, &vocab[p]],
        _ => vec![a],
    }
}

/// Pairs controls within each family so multilabel checks name related
/// controls. SC-28 and SC-13 always form a pair.
fn assign_partners(vocab: &mut [ControlVocab]) {
    for family in 0..FAMILIES.len() {
        let mut members: Vec<usize> = (0..vocab.len()).filter(|&i| vocab[i].family == family).collect();
        let pos = |id: &str, m: &[usize]| m.iter().position(|&i| vocab[i].control_id == id);
        if let (Some(x), Some(y)) = (pos("SC-28", &members), pos("SC-13", &members)) {
            let (a, b) = (members[x], members[y]);
            members.retain(|&i| i != a && i != b);
            members.splice(0..0, [a, b]);
        }
        for pair in members.chunks_exact(2) {
            vocab[pair[0]].partner = Some(pair[1]);
            vocab[pair[1]].partner = Some(pair[0]);
        }
    }
}

fn anchor_check(check_id: &str, title: &str, labels: &[&str]) -> TechspecCheck {
    TechspecCheck {
        check_id: check_id.into(),
        title: title.into(),
        description: String::new(),
        rationale: String::new(),
        fix: String::new(),
        source: "anchor".into(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

/// Hand-labelled anchor checks for the NIST catalog.
pub fn anchor_checks() -> Vec<TechspecCheck> {
    vec![
        anchor_check("T-1", PASSWORD_UPPERCASE_CHECK, &["IA-5(1)"]),
        anchor_check("T-2", KUBERNETES_ADMINS_CHECK, &["AC-6"]),
        anchor_check("T-4", DISK_ENCRYPTION_CHECK, &["SC-28", "SC-13"]),
    ]
}

fn hipaa(rng: &mut ChaCha8Rng, config: &FixtureConfig) -> (Vec<RegulationControl>, Vec<TechspecCheck>) {
    let controls = HIPAA_CONTROLS
        .iter()
        .map(|(id, family, title, text, _)| RegulationControl {
            regulation_id: HIPAA_REGULATION.into(),
            control_id: id.to_string(),
            family: family.to_string(),
            title: title.to_string(),
            text: text.to_string(),
        })
        .collect();
    let mut checks = vec![anchor_check("T-3", DISK_ENCRYPTION_CHECK, &["164.312(a)(2)(iv)"])];
    for i in 0..config.hipaa_checks {
        let (id, _, _, _, terms) = HIPAA_CONTROLS[i % HIPAA_CONTROLS.len()];
        let chosen: Vec<&str> = terms.choose_multiple(rng, 3).copied().collect();
        let bg: Vec<&str> = BACKGROUND.choose_multiple(rng, 2).copied().collect();
        checks.push(TechspecCheck {
            check_id: format!("H-{:03}", i + 1),
            title: format!("Ensure {} {} is {} on the {}", chosen[0], chosen[1], bg[0], bg[1]),
            description: format!("Checks {} for {}.", chosen[2], bg[1]),
            rationale: String::new(),
            fix: String::new(),
            source: "CIS".into(),
            labels: BTreeSet::from([id.to_string()]),
        });
    }
    (controls, checks)
}

pub fn generate(config: &FixtureConfig) -> Fixtures {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = build_vocab(&mut rng, config);
    let nist_controls = vocab.iter().map(|v| nist_control(v, &mut rng)).collect();

    let mut checks = anchor_checks();
    for i in checks.len()..config.checks {
        let first = i % vocab.len();
        let targets = choose_targets(&vocab, config, &mut rng, first);
        checks.push(benchmark_check(i, &targets, &vocab, config, &mut rng));
    }
    checks.shuffle(&mut rng);

    let operator = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<TechspecCheck> {
        (0..n)
            .map(|i| {
                let first = rng.gen_range(0..vocab.len());
                let targets = choose_targets(&vocab, config, rng, first);
                operator_rule(i, prefix, &targets, rng)
            })
            .collect()
    };
    let feedback_pool = operator(config.feedback_pool, "OP", &mut rng);
    let feedback_eval = operator(config.feedback_eval, "OPE", &mut rng);
    let (hipaa_controls, hipaa_checks) = hipaa(&mut rng, config);

    Fixtures {
        nist_controls,
        hipaa_controls,
        checks,
        feedback_pool,
        feedback_eval,
        hipaa_checks,
    }
}
