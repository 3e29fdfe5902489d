use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lemb_core::harness::{bench_latency, parse_config, run_scenario, BenchConfig, Scenario};
use lemb_core::pretrain::{
    contrastive_pretrain, kge_pretrain, read_interactions, read_triples, run_benchmark_seeds, staleness_experiment,
    BenchmarkConfig, StalenessConfig, TrainConfig,
};
use lemb_core::quant::{f16_payload_bytes, quantize_int4, size_report, DEFAULT_GROUP_SIZE};
use lemb_core::serving::cpu_leaf::{Manifest, MANIFEST_FILE};
use lemb_core::serving::deployer::{DeployError, Endpoints, UPPER_MODEL_FILE};
use lemb_core::serving::{
    serve, AdsServer, AdsServerConfig, CpuLeaf, CpuLeafConfig, Deployer, DeployerConfig, GpuLeaf, GpuLeafConfig,
    Handler, Phase, TcpTransport, Transport,
};
use lemb_core::EmbeddingTable;

#[derive(Parser)]
#[command(name = "lemb", version, about = "Hashed embedding tables: training, compression and versioned serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Contrastive,
    Kge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Staleness,
    Freeze,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a PEMB table to INT4 and print its size report.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
    },
    /// Pretrain embedding tables and write them with a manifest.
    Pretrain {
        objective: Objective,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an offline experiment and print one JSON line.
    Experiment {
        kind: Experiment,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve embedding lookups from a model directory.
    ServeCpu {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        memory_budget_bytes: Option<u64>,
    },
    /// Serve scoring with every upper model found in a directory.
    ServeGpu {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        max_versions: usize,
    },
    /// Serve inference requests against the two leaves.
    ServeAds {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        cpu_leaf: String,
        #[arg(long)]
        gpu_leaf: String,
        /// Wait for the other feature work before fetching embeddings.
        #[arg(long)]
        sequential: bool,
    },
    /// Roll out a candidate directory (manifest.json plus upper.json).
    /// Re-running with the same candidate resumes an interrupted rollout.
    Deploy {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        cpu_leaf: String,
        #[arg(long)]
        gpu_leaf: String,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = DeployerConfig::default().drain_window_ms)]
        drain_window_ms: u64,
    },
    /// Undo an unfinished rollout recorded in a state file.
    Rollback {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = DeployerConfig::default().drain_window_ms)]
        drain_window_ms: u64,
    },
    /// Compare early-fetch and sequential pipeline latency.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a chaos scenario; fails when any consistency check fails.
    Chaos {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => Ok(parse_config(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_tables(dir: &Path, version_id: &str, tables: &[&EmbeddingTable]) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut names = BTreeMap::new();
    for t in tables {
        let file = format!("{}.pemb", t.table_id());
        t.save(dir.join(&file))?;
        names.insert(t.table_id().to_string(), file);
    }
    Manifest {
        version_id: version_id.to_string(),
        tables: names,
    }
    .write(dir)?;
    eprintln!("wrote {} tables and {MANIFEST_FILE} to {}", tables.len(), dir.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(default)]
struct FreezeConfig {
    #[serde(flatten)]
    benchmark: BenchmarkConfig,
    seeds: u64,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            seeds: 100,
        }
    }
}

async fn resolve(addr: &str) -> CliResult<SocketAddr> {
    tokio::net::lookup_host(addr)
        .await?
        .next()
        .ok_or_else(|| format!("cannot resolve {addr}").into())
}

async fn tcp(addr: &str) -> CliResult<Arc<dyn Transport>> {
    Ok(Arc::new(TcpTransport::new(resolve(addr).await?)))
}

async fn run_server(listen: &str, handler: Arc<dyn Handler>, name: &str) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind(resolve(listen).await?).await?;
    let server = serve(listener, handler)?;
    eprintln!("{name} listening on {}", server.addr);
    tokio::select! {
        _ = server.wait() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    Ok(())
}

fn finish_episode(d: &mut Deployer, result: Result<(), DeployError>) -> CliResult<()> {
    for entry in d.take_report() {
        print_json(&entry)?;
    }
    result.map_err(Into::into)
}

async fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Quantize { input, out, group_size } => {
            let table = EmbeddingTable::load(&input)?;
            let q = quantize_int4(&table, group_size)?;
            q.table().save(&out)?;
            print_json(&size_report(f16_payload_bytes(table.num_rows(), table.dim()), &q)?)
        }
        Command::Pretrain {
            objective,
            data,
            config,
            out_dir,
        } => {
            let cfg: TrainConfig = read_config(&config)?;
            match objective {
                Objective::Contrastive => {
                    let (users, pins) = contrastive_pretrain(&read_interactions(&data)?, &cfg)?;
                    write_tables(&out_dir, &cfg.version_id, &[&users, &pins])
                }
                Objective::Kge => {
                    let model = kge_pretrain(&read_triples(&data)?, &cfg)?;
                    let mut tables: Vec<&EmbeddingTable> = model.entity_tables.values().collect();
                    tables.push(&model.relation_table);
                    write_tables(&out_dir, &cfg.version_id, &tables)?;
                    print_json(&serde_json::json!({ "epoch_losses": model.epoch_losses }))
                }
            }
        }
        Command::Experiment { kind, config } => match kind {
            Experiment::Staleness => {
                let cfg: StalenessConfig = read_config(&config)?;
                print_json(&staleness_experiment(&cfg)?)
            }
            Experiment::Freeze => {
                let cfg: FreezeConfig = read_config(&config)?;
                print_json(&run_benchmark_seeds(&cfg.benchmark, 0..cfg.seeds)?)
            }
        },
        Command::ServeCpu {
            listen,
            model_dir,
            memory_budget_bytes,
        } => {
            let leaf = Arc::new(CpuLeaf::new(CpuLeafConfig {
                memory_budget_bytes,
                load_inline: false,
            }));
            if let Some(dir) = model_dir {
                let v = leaf.load_model(dir).await?;
                eprintln!("loaded embedding model {v}");
            }
            run_server(&listen, leaf, "embedding leaf").await
        }
        Command::ServeGpu {
            listen,
            models,
            max_versions,
        } => {
            let leaf = Arc::new(GpuLeaf::new(GpuLeafConfig {
                max_versions,
                ..Default::default()
            })?);
            if let Some(dir) = models {
                eprintln!("installed upper models {:?}", leaf.install_dir(&dir)?);
            }
            run_server(&listen, leaf, "scorer leaf").await
        }
        Command::ServeAds {
            listen,
            cpu_leaf,
            gpu_leaf,
            sequential,
        } => {
            let ads = AdsServer::new(
                tcp(&cpu_leaf).await?,
                tcp(&gpu_leaf).await?,
                AdsServerConfig {
                    early_fetch: !sequential,
                    ..Default::default()
                },
            );
            run_server(&listen, Arc::new(ads), "ads server").await
        }
        Command::Deploy {
            candidate,
            cpu_leaf,
            gpu_leaf,
            state,
            drain_window_ms,
        } => {
            let cfg = DeployerConfig {
                drain_window_ms,
                ..Default::default()
            };
            let mut d = Deployer::open(tcp(&cpu_leaf).await?, tcp(&gpu_leaf).await?, &state, cfg)?;
            d.set_endpoints(Endpoints { cpu_leaf, gpu_leaf })?;
            let candidate_version = Manifest::read(&candidate)?.version_id;
            let result = if d.state().phase != Phase::Steady
                && d.state().candidate_version.as_deref() == Some(candidate_version.as_str())
            {
                d.resume().await
            } else {
                if !candidate.join(UPPER_MODEL_FILE).exists() {
                    eprintln!("warning: {} has no {UPPER_MODEL_FILE}", candidate.display());
                }
                d.deploy(&candidate).await
            };
            finish_episode(&mut d, result)
        }
        Command::Rollback { state, drain_window_ms } => {
            let endpoints = lemb_core::serving::DeploymentState::read(&state)?
                .endpoints
                .ok_or("state file records no service addresses; deploy with this state file first")?;
            let cfg = DeployerConfig {
                drain_window_ms,
                ..Default::default()
            };
            let mut d = Deployer::open(tcp(&endpoints.cpu_leaf).await?, tcp(&endpoints.gpu_leaf).await?, &state, cfg)?;
            let result = d.rollback().await;
            finish_episode(&mut d, result)
        }
        Command::Bench { scenario, out } => {
            let cfg = BenchConfig::from_json(&fs::read_to_string(&scenario)?)?;
            let result = tokio::task::spawn_blocking(move || bench_latency(&cfg)).await??;
            if let Some(out) = out {
                fs::write(out, serde_json::to_vec_pretty(&result)?)?;
            }
            print_json(&result)
        }
        Command::Chaos { scenario, out } => {
            let s = Scenario::from_json(&fs::read_to_string(&scenario)?)?;
            let r = tokio::task::spawn_blocking(move || run_scenario(&s)).await??;
            if let Some(out) = out {
                fs::write(out, serde_json::to_vec_pretty(&r)?)?;
            }
            print_json(&r)?;
            let failed = r.version_mismatch_count > 0
                || r.fingerprint_mismatches > 0
                || r.score_mismatches > 0
                || r.safety_violations > 0
                || r.ordering_violations > 0
                || !r.accounting_consistent
                || !r.converged;
            if failed {
                return Err("consistency checks failed".into());
            }
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
