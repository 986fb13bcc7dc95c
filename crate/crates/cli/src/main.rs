//! `selfmae` command-line driver.

mod commands;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::error;

use settings::{flag_name, Settings, KEYS};

pub const THREADS_ENV: &str = "SELFMAE_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    Runtime(selfmae::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Runtime(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<selfmae::Error> for CliError {
    fn from(e: selfmae::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("gen-data", "Generate the synthetic texture dataset"),
    ("pretrain", "Pre-train a masked autoencoder"),
    ("analyze", "Compute token-relation diagnostics for a checkpoint"),
    ("mask", "Write informed masks and bipartitions for images"),
    ("probe", "Linear-probe a checkpoint's frozen encoder"),
];

fn cli() -> Command {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help("Flat `section.key = value` config file; flags override it")];
    for k in KEYS {
        let mut a = Arg::new(k.key)
            .long(flag_name(k.key))
            .help(k.help)
            .action(ArgAction::Set);
        if k.boolean {
            a = a.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        } else {
            a = a.value_name("VALUE");
        }
        args.push(a);
    }
    Command::new("selfmae")
        .about("Desk-scale self-guided masked autoencoder")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(
            SUBCOMMANDS
                .iter()
                .map(|(name, about)| Command::new(*name).about(*about).args(args.clone())),
        )
}

fn resolve(m: &ArgMatches) -> Result<Settings, CliError> {
    let mut s = Settings::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        s.apply_file(path)?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.key) {
            s.set(k.key, v)?;
        }
    }
    Ok(s)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| CliError::usage(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))
}

fn run() -> Result<(), CliError> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_threads()?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let settings = resolve(sub)?;
    match name {
        "gen-data" => commands::gen_data(&settings),
        "pretrain" => commands::pretrain(&settings),
        "analyze" => commands::analyze(&settings),
        "mask" => commands::mask(&settings),
        "probe" => commands::probe(&settings),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", e.message());
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("selfmae-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("run.cfg");
        std::fs::write(&cfg, "train.epochs = 7\ntrain.lr = 0.002\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "selfmae",
                "pretrain",
                "--config",
                cfg.to_str().unwrap(),
                "--epochs",
                "3",
                "--svg",
            ])
            .unwrap();
        let s = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!(s.raw("train.epochs"), "3");
        assert_eq!(s.raw("train.lr"), "0.002");
        assert_eq!(s.raw("analyze.svg"), "true");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
