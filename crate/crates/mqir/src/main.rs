use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use mqir::config::{keys, ConfigBuilder, ConfigError, Kind, RunConfig};
use mqir::engine::QueryRequest;
use mqir::formats;
use mqir::pipeline::{self, EvalSummary, TrainSummary, Verbosity};
use mqir::service::{router, Ready, ServiceState};

const SUBCOMMANDS: [(&str, &str); 7] = [
    ("gen-synth", "Generate the grouped synthetic corpus, its split and scene layouts"),
    ("build-vocab", "Build the subword vocabulary from the training captions"),
    ("train", "Train a matcher; --resplits N trains and evaluates over N group splits"),
    ("evaluate", "Report R@1, R@5, R@10 and mAP of a checkpoint on the eval split"),
    ("build-index", "Encode a feature file into a retrieval index"),
    ("query", "Rank images for one caption (+ trace) query"),
    ("serve", "Serve queries and scene thumbnails over HTTP"),
];

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config").long("config").value_name("FILE").help("Config file (TOML sections of key = value)"),
        Arg::new("run-dir")
            .long("run-dir")
            .value_name("DIR")
            .help("Write outputs here instead of <out-dir>/<time>-seed<seed>"),
        Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue).help("No progress output"),
        Arg::new("no-position")
            .long("no-position")
            .action(ArgAction::SetTrue)
            .conflicts_with("use_positions")
            .help("Drop the 1D position embeddings (same as --use-positions=false)"),
        Arg::new("no-location")
            .long("no-location")
            .action(ArgAction::SetTrue)
            .conflicts_with("use_locations")
            .help("Drop the 2D location embeddings (same as --use-locations=false)"),
    ];
    for k in keys() {
        let help = format!("[{}] default: {}", k.section, if k.default.is_empty() { "\"\"" } else { &k.default });
        let mut arg = Arg::new(k.key.clone()).long(k.flag()).help(help).help_heading("Config keys");
        arg = match k.kind {
            Kind::Bool => arg.value_name("BOOL").num_args(0..=1).default_missing_value("true"),
            Kind::Int => arg.value_name("INT"),
            Kind::Float => arg.value_name("NUM"),
            Kind::Str => arg.value_name("STR"),
        };
        args.push(arg);
    }
    args
}

fn cli() -> Command {
    let mut cmd = Command::new("mqir")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Image retrieval from spoken captions with synchronized mouse traces")
        .after_help("Every config key is also read from MQIR_<KEY> (e.g. MQIR_T_P). Flags beat the environment, which beats the config file.")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).args(config_args());
        if name == "query" {
            sub = sub
                .arg(
                    Arg::new("caption")
                        .long("caption")
                        .value_name("TEXT")
                        .conflicts_with("request")
                        .help("Caption; words get 0.4 s each and no trace"),
                )
                .arg(
                    Arg::new("request")
                        .long("request")
                        .value_name("FILE")
                        .help("Query request JSON, as posted to /v1/query"),
                )
                .arg(Arg::new("target-id").long("target-id").value_name("ID").help("Report this image's rank"));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, ConfigError> {
    let mut b = ConfigBuilder::default();
    if let Some(path) = m.get_one::<String>("config") {
        b.merge_file(&PathBuf::from(path))?;
    }
    b.merge_env(std::env::vars())?;
    for k in keys() {
        if m.value_source(&k.key) == Some(ValueSource::CommandLine) {
            let raw = m.get_one::<String>(&k.key).expect("flag has a value");
            b.set(&k.key, raw)?;
        }
    }
    if m.get_flag("no-position") {
        b.set("use_positions", "false")?;
    }
    if m.get_flag("no-location") {
        b.set("use_locations", "false")?;
    }
    b.build()
}

fn query_request(m: &ArgMatches) -> Result<QueryRequest> {
    let mut req = match (m.get_one::<String>("request"), m.get_one::<String>("caption")) {
        (Some(path), _) => {
            let bytes = formats::read_bytes(&PathBuf::from(path))?;
            QueryRequest::from_json(&bytes).map_err(|e| anyhow!("{path}: {e}"))?
        }
        (None, Some(caption)) => QueryRequest { caption: caption.clone(), ..Default::default() },
        (None, None) => return Err(anyhow!("query needs --caption or --request")),
    };
    if let Some(t) = m.get_one::<String>("target-id") {
        req.target_id = Some(t.clone());
    }
    Ok(req)
}

fn serve(cfg: RunConfig, v: Verbosity) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", cfg.service.host, cfg.service.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        let state = ServiceState::new();
        // health answers 503 until loading finishes
        eprintln!("listening on http://{}", listener.local_addr()?);
        let loader = {
            let state = Arc::clone(&state);
            tokio::task::spawn_blocking(move || -> Result<()> {
                let engine = pipeline::load_engine(&cfg)?;
                let scenes_path = PathBuf::from(&cfg.paths.scene_file);
                let scenes = if scenes_path.exists() { formats::read_scenes(&scenes_path)? } else { Vec::new() };
                let scenes = scenes.into_iter().map(|s| (s.image_id.clone(), s)).collect();
                let n = engine.index.len();
                state.set_ready(Ready { engine, scenes, config: cfg });
                v.say(format!("ready: {n} images indexed"));
                Ok(())
            })
        };
        let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        });
        let server = tokio::spawn(async move { server.await });
        loader.await??;
        server.await??;
        Ok(())
    })
}

fn run(name: &str, m: &ArgMatches, cfg: RunConfig) -> Result<()> {
    let v = Verbosity { quiet: m.get_flag("quiet") };
    let dir = pipeline::create_run_dir(&cfg, m.get_one::<String>("run-dir").map(PathBuf::from).as_deref())?;
    pipeline::write_effective_config(&dir, &cfg)?;
    match name {
        "gen-synth" => {
            pipeline::gen_synth(&cfg, &dir, v)?;
        }
        "build-vocab" => {
            pipeline::build_vocab(&cfg, &dir, v)?;
        }
        "train" => match pipeline::train_cmd(&cfg, &dir, v)? {
            TrainSummary::Single(out) => println!("checkpoint={}", out.checkpoint.display()),
            TrainSummary::Resplits { mean, std, .. } => {
                println!("R@1={:.4} ± {:.4}", mean.r1, std.r1)
            }
        },
        "evaluate" => {
            let (text, summary) = pipeline::evaluate_cmd(&cfg, &dir)?;
            print!("{text}");
            if let EvalSummary::Folds { folds, .. } = summary {
                eprintln!("averaged over {} folds", folds.len());
            }
        }
        "build-index" => {
            let path = pipeline::build_index_cmd(&cfg, &dir, v)?;
            println!("index={}", path.display());
        }
        "query" => {
            let req = query_request(m)?;
            let resp = pipeline::query_cmd(&cfg, &dir, &req)?;
            println!("{}", serde_json::to_string_pretty(&resp)?);
        }
        "serve" => serve(cfg, v)?,
        other => unreachable!("unknown subcommand {other}"),
    }
    if !v.quiet && name != "serve" {
        eprintln!("run directory: {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut cmd = cli();
    let matches = match cmd.try_get_matches_from_mut(std::env::args_os()) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = match resolve(sub) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}\n");
            let _ = cmd.find_subcommand_mut(name).expect("known subcommand").print_help();
            return ExitCode::from(2);
        }
    };
    match run(name, sub, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
