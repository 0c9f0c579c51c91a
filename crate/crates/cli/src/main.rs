mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use melle_core::error::ErrorClass;

use config::{Section, SCHEMA};

fn schema_args(cmd: Command, sections: &[Section]) -> Command {
    SCHEMA
        .iter()
        .filter(|s| sections.contains(&s.section))
        .fold(cmd, |cmd, s| {
            cmd.arg(
                Arg::new(s.key)
                    .long(s.flag())
                    .value_name("VALUE")
                    .help(s.help)
                    .help_heading(format!("[{}] settings", s.section.name())),
            )
        })
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("Sectioned key = value config file; flags override it")
}

pub fn cli() -> Command {
    let extract = Command::new("extract")
        .about("Extract log-mel features (MELF) for every manifest line")
        .arg(Arg::new("manifest").required(true).help("Manifest: <wav path>\\t<transcript> per line"))
        .arg(Arg::new("out_dir").required(true).help("Output directory for .melf files and manifest.tsv"));

    let train = Command::new("train")
        .about("Train a model; writes checkpoints, vocab.txt and metrics.tsv")
        .arg(Arg::new("manifest").long("manifest").required(true).value_name("FILE").help("Training manifest (wav or melf paths)"))
        .arg(Arg::new("out").long("out").required(true).value_name("DIR").help("Output directory"))
        .arg(config_arg())
        .arg(Arg::new("resume").long("resume").value_name("CHECKPOINT").help("Continue from a checkpoint"));
    let train = schema_args(train, &[Section::Run, Section::Model, Section::Train]);

    let synth = Command::new("synth")
        .about("Synthesize speech from a prompt and target text")
        .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE"))
        .arg(Arg::new("vocab").long("vocab").value_name("FILE").help("Vocabulary file [default: vocab.txt next to the checkpoint]"))
        .arg(Arg::new("prompt_wav").long("prompt-wav").required(true).value_name("FILE").help("Prompt audio (wav or melf)"))
        .arg(Arg::new("prompt_text").long("prompt-text").default_value("").value_name("TEXT").help("Transcript of the prompt audio"))
        .arg(Arg::new("target_text").long("target-text").required(true).value_name("TEXT"))
        .arg(Arg::new("out").long("out").required(true).value_name("WAV").help("Output WAV; a .melf sidecar is written next to it"))
        .arg(Arg::new("report").long("report").value_name("FILE").help("JSON-lines report to append to [default: <out>.jsonl]"))
        .arg(config_arg());
    let synth = schema_args(synth, &[Section::Run, Section::Synth]);

    let gradcheck = Command::new("gradcheck")
        .about("Finite-difference gradient checks; exits 3 on any failure")
        .arg(
            Arg::new("component")
                .long("component")
                .value_name("NAME")
                .value_parser(["all", "ops", "model", "losses", "end_to_end"])
                .default_value("all"),
        )
        .arg(Arg::new("max_entries").long("max-entries").value_name("N").help("Entries checked per tensor [default: all]"))
        .arg(config_arg());
    let gradcheck = schema_args(gradcheck, &[Section::Run, Section::Model]);

    let ablate = Command::new("ablate")
        .about("Train ablation variants on a manifest and print a comparison table")
        .arg(Arg::new("manifest").long("manifest").required(true).value_name("FILE"))
        .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
        .arg(config_arg())
        .arg(Arg::new("no_latent_sampling").long("no-latent-sampling").action(ArgAction::SetTrue).help("Include the plain-linear-head variant"))
        .arg(Arg::new("no_flux").long("no-flux").action(ArgAction::SetTrue).help("Include the beta = 0 variant"))
        .arg(
            Arg::new("sampling")
                .long("sampling")
                .value_name("MODE")
                .value_parser(["mean"])
                .help("`mean`: include mean-mode decoding of the full model"),
        );
    let ablate = schema_args(ablate, &[Section::Run, Section::Model, Section::Train]);

    Command::new("melle")
        .about("Continuous mel-spectrogram language-model text-to-speech")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([extract, train, synth, gradcheck, ablate])
}

fn run(m: &ArgMatches) -> melle_core::Result<ExitCode> {
    match m.subcommand() {
        Some(("extract", a)) => commands::extract(a),
        Some(("train", a)) => commands::train(a),
        Some(("synth", a)) => commands::synth(a),
        Some(("gradcheck", a)) => commands::gradcheck(a),
        Some(("ablate", a)) => commands::ablate(a),
        _ => unreachable!("subcommand required"),
    }
}

pub fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
