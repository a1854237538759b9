//! `codemark`: corpus generation, base-model fitting, policy training,
//! watermarked generation, detection and evaluation.
//!
//! Exit status is 0 on success, 1 on a usage error (nothing is written) and
//! 2 when the command fails at run time.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Arg, ArgMatches};

use commands::{check_paths, Command, Run, COMMANDS};
use config::{load_config_file, RunConfig, UsageError, KEYS};

fn cli() -> clap::Command {
    let mut root = clap::Command::new("codemark")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Learned selective watermarking for MiniLang code")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(_, name, about) in COMMANDS {
        let mut sub = clap::Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("`key = value` settings; flags override them"));
        for k in KEYS {
            sub = sub.arg(Arg::new(k.name).long(k.name.replace('_', "-")).value_name(k.value).help(k.help));
        }
        root = root.subcommand(sub);
    }
    root
}

fn build_config(sub: &ArgMatches) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = sub.get_one::<String>("config") {
        for (k, v) in load_config_file(path.as_ref())? {
            cfg.set(&k, &v)?;
        }
    }
    for k in KEYS {
        if let Some(v) = sub.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    cfg.resolve()?;
    Ok(cfg)
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
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command = Command::from_name(name).expect("registered subcommand");
    let cfg = build_config(sub).and_then(|mut cfg| check_paths(command, &mut cfg).map(|_| cfg));
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
        eprintln!("error: cannot start worker threads: {e}");
        return ExitCode::from(2);
    }
    let mut run = Run::new(command, cfg);
    let result = run.execute();
    let meta = run.write_metadata(result.as_ref().err());
    match (result, meta) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) | (Ok(()), Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
