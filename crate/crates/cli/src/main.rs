//! `focus`: data generation, training, refinement experiments and toy-model analysis.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Arg, ArgMatches, Command};

use commands::{load_config, CliError, COMMANDS};
use settings::{Settings, KEYS};

fn cli() -> Command {
    let keys: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            Arg::new(k.name).long(k.name).value_name("VALUE").help(help)
        })
        .collect();
    let config = Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("flat `key = value` file; flags override it");
    Command::new("focus")
        .about("Test-time refinement of uncertain predictions")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(COMMANDS.iter().map(|(name, about)| {
            Command::new(*name)
                .about(*about)
                .arg(config.clone())
                .args(keys.iter().cloned())
        }))
}

fn resolve(matches: &ArgMatches) -> Result<Settings, CliError> {
    let mut settings = Settings::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        load_config(&mut settings, path)?;
    }
    for k in KEYS {
        if let Some(v) = matches.get_one::<String>(k.name) {
            settings.set(k.name, v)?;
        }
    }
    Ok(settings)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (command, sub) = matches.subcommand().expect("subcommand is required");
    match resolve(sub).and_then(|s| commands::run(command, &s)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
