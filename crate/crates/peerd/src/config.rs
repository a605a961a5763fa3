//! Daemon configuration file.
//!
//! | key              | default                         |
//! |------------------|---------------------------------|
//! | `identity_path`  | required                        |
//! | `listen`         | required, e.g. `127.0.0.1:7001` |
//! | `advertise`      | `listen`                        |
//! | `subject`        | `cn=peer-<port>`                |
//! | `trust_mode`     | `incremental`                   |
//! | `trust_roots`    | none                            |
//! | `bootstrap`      | none (ad hoc)                   |
//! | `lobby_group`    | `lobby`                         |
//! | `share_dirs`     | none                            |
//! | `data_dir`       | `<identity dir>/data`           |
//! | `relay_notes`    | `true`                          |
//! | `hits_via_group` | `false`                         |
//! | `control_port`   | `7777`                          |

use std::path::{Path, PathBuf};

use adhoc::identity::TrustMode;
use netsim::EndpointAddr;
use serde_json::{Map, Value};
use thiserror::Error;

pub const DEFAULT_CONTROL_PORT: u16 = 7777;

const KNOWN_KEYS: &[&str] = &[
    "identity_path",
    "listen",
    "advertise",
    "subject",
    "trust_mode",
    "trust_roots",
    "bootstrap",
    "lobby_group",
    "share_dirs",
    "data_dir",
    "relay_notes",
    "hits_via_group",
    "control_port",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    Syntax(String),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerConfig {
    pub identity_path: PathBuf,
    pub listen: EndpointAddr,
    /// Address other peers use to reach us.
    pub advertise: EndpointAddr,
    pub subject: String,
    pub trust_mode: TrustMode,
    pub trust_roots: Vec<PathBuf>,
    pub bootstrap: Vec<EndpointAddr>,
    pub lobby_group: String,
    pub share_dirs: Vec<PathBuf>,
    pub data_dir: PathBuf,
    pub relay_notes: bool,
    pub hits_via_group: bool,
    pub control_port: u16,
}

/// A parsed config plus the unknown keys that were ignored.
#[derive(Debug)]
pub struct Loaded {
    pub config: PeerConfig,
    pub warnings: Vec<String>,
}

pub fn load_config(path: &Path) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Relative paths are resolved against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<Loaded, ConfigError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ConfigError::Syntax("top level must be an object".into()));
    };
    let warnings = obj
        .keys()
        .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|k| format!("unknown config key `{k}` ignored"))
        .collect();

    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let identity_path = resolve(&req_str(&obj, "identity_path")?);
    let listen = addr("listen", req_str(&obj, "listen")?)?;
    let advertise = match opt_str(&obj, "advertise")? {
        Some(s) => addr("advertise", s)?,
        None => listen,
    };
    if advertise.to_socket_addr().ip().is_unspecified() {
        return Err(invalid(
            "advertise",
            "an unspecified listen address needs an explicit advertise address",
        ));
    }
    let subject = opt_str(&obj, "subject")?.unwrap_or_else(|| format!("cn=peer-{}", listen.port));
    if subject.trim().is_empty() {
        return Err(invalid("subject", "must not be empty"));
    }
    let trust_mode = match opt_str(&obj, "trust_mode")?.as_deref() {
        None | Some("incremental") => TrustMode::Incremental,
        Some("registered") => TrustMode::Registered,
        Some(other) => {
            return Err(invalid(
                "trust_mode",
                format!("`{other}` is not one of registered, incremental"),
            ))
        }
    };
    let trust_roots: Vec<PathBuf> = str_list(&obj, "trust_roots")?
        .iter()
        .map(|s| resolve(s))
        .collect();
    if trust_mode == TrustMode::Registered && trust_roots.is_empty() {
        return Err(invalid(
            "trust_roots",
            "registered trust needs at least one root certificate",
        ));
    }
    let bootstrap = str_list(&obj, "bootstrap")?
        .into_iter()
        .map(|s| {
            s.parse()
                .map_err(|_| invalid("bootstrap", format!("`{s}` is not host:port")))
        })
        .collect::<Result<Vec<EndpointAddr>, _>>()?;
    let lobby_group = opt_str(&obj, "lobby_group")?.unwrap_or_else(|| "lobby".into());
    if lobby_group.is_empty() || lobby_group.len() > 255 {
        return Err(invalid("lobby_group", "must be 1 to 255 bytes"));
    }
    let share_dirs: Vec<PathBuf> = str_list(&obj, "share_dirs")?
        .iter()
        .map(|s| resolve(s))
        .collect();
    for d in &share_dirs {
        if !d.is_dir() {
            return Err(invalid(
                "share_dirs",
                format!("{} is not a directory", d.display()),
            ));
        }
    }
    for r in &trust_roots {
        if !r.is_file() {
            return Err(invalid(
                "trust_roots",
                format!("{} does not exist", r.display()),
            ));
        }
    }
    let data_dir = match opt_str(&obj, "data_dir")? {
        Some(s) => resolve(&s),
        None => identity_path.parent().unwrap_or(base).join("data"),
    };
    let control_port = match obj.get("control_port") {
        None => DEFAULT_CONTROL_PORT,
        Some(v) => v
            .as_u64()
            .and_then(|p| u16::try_from(p).ok())
            .filter(|p| *p != 0)
            .ok_or_else(|| invalid("control_port", "must be an integer in 1..=65535"))?,
    };
    Ok(Loaded {
        config: PeerConfig {
            identity_path,
            listen,
            advertise,
            subject,
            trust_mode,
            trust_roots,
            bootstrap,
            lobby_group,
            share_dirs,
            data_dir,
            relay_notes: opt_bool(&obj, "relay_notes", true)?,
            hits_via_group: opt_bool(&obj, "hits_via_group", false)?,
            control_port,
        },
        warnings,
    })
}

fn addr(key: &'static str, s: String) -> Result<EndpointAddr, ConfigError> {
    s.parse()
        .map_err(|_| invalid(key, format!("`{s}` is not host:port")))
}

fn req_str(obj: &Map<String, Value>, key: &'static str) -> Result<String, ConfigError> {
    opt_str(obj, key)?.ok_or(ConfigError::Missing(key))
}

fn opt_str(obj: &Map<String, Value>, key: &'static str) -> Result<Option<String>, ConfigError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(invalid(key, "must be a string")),
    }
}

fn opt_bool(
    obj: &Map<String, Value>,
    key: &'static str,
    default: bool,
) -> Result<bool, ConfigError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(invalid(key, "must be true or false")),
    }
}

fn str_list(obj: &Map<String, Value>, key: &'static str) -> Result<Vec<String>, ConfigError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| invalid(key, "must be a list of strings"))
            })
            .collect(),
        Some(_) => Err(invalid(key, "must be a list of strings")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Loaded, ConfigError> {
        parse_config(text, Path::new("/etc/peerd"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let l = parse(r#"{"identity_path": "id.json", "listen": "127.0.0.1:7001"}"#).unwrap();
        let c = l.config;
        assert!(l.warnings.is_empty());
        assert_eq!(c.identity_path, PathBuf::from("/etc/peerd/id.json"));
        assert_eq!(c.control_port, 7777);
        assert_eq!(c.trust_mode, TrustMode::Incremental);
        assert_eq!(c.lobby_group, "lobby");
        assert!(c.bootstrap.is_empty());
        assert!(c.relay_notes);
        assert!(!c.hits_via_group);
        assert_eq!(c.advertise, c.listen);
        assert_eq!(c.subject, "cn=peer-7001");
        assert_eq!(c.data_dir, PathBuf::from("/etc/peerd/data"));
    }

    #[test]
    fn bad_trust_mode_names_the_field() {
        let e = parse(
            r#"{"identity_path": "id.json", "listen": "127.0.0.1:7001", "trust_mode": "both"}"#,
        )
        .unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "trust_mode",
                ..
            }
        ));
        assert!(e.to_string().contains("trust_mode"));
    }

    #[test]
    fn unknown_keys_warn() {
        let l =
            parse(r#"{"identity_path": "id.json", "listen": "127.0.0.1:7001", "colour": "blue"}"#)
                .unwrap();
        assert_eq!(l.warnings.len(), 1);
        assert!(l.warnings[0].contains("colour"));
    }

    #[test]
    fn missing_and_malformed_fields_are_named() {
        assert!(matches!(
            parse(r#"{"listen": "127.0.0.1:1"}"#),
            Err(ConfigError::Missing("identity_path"))
        ));
        let e =
            parse(r#"{"identity_path": "i", "listen": "127.0.0.1:1", "bootstrap": ["nowhere"]}"#)
                .unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "bootstrap",
                ..
            }
        ));
        let e = parse(r#"{"identity_path": "i", "listen": "127.0.0.1:1", "control_port": 70000}"#)
            .unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "control_port",
                ..
            }
        ));
        let e = parse(r#"{"identity_path": "i", "listen": "0.0.0.0:1"}"#).unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "advertise",
                ..
            }
        ));
        let e =
            parse(r#"{"identity_path": "i", "listen": "127.0.0.1:1", "trust_mode": "registered"}"#)
                .unwrap_err();
        assert!(matches!(
            e,
            ConfigError::Invalid {
                field: "trust_roots",
                ..
            }
        ));
        assert!(matches!(parse("[1]"), Err(ConfigError::Syntax(_))));
    }
}
