use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dribble_core::dynamics::ActionVector;
use dribble_core::env::Env;
use dribble_core::eval::{
    default_command_source, evaluate_task, format_turn_summary, run_dribble_trials, run_turn_experiment, summarize_tasks,
    summarize_turns, trajectories_svg, Controller, EvalError, PolicyController, ScriptedDribbler, TaskKind, TaskResult,
    TaskSpec,
};
use dribble_core::interface::checkpoint::{load_checkpoint, Checkpoint};
use dribble_core::interface::config::{hex, RunConfig};
use dribble_core::interface::replay::{parse_command_script, play, DEFAULT_COMMAND_SCRIPT};
use dribble_core::interface::serve::{spawn_server, ServeOptions};
use dribble_core::interface::train::{request_stage_advance, train_to_dir, TrainOptions, TrainStart};
use dribble_core::interface::wire::Scenario;

#[derive(Parser)]
#[command(name = "dribble", version, about = "Train, evaluate and tele-operate the dribbling policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run curriculum PPO training into a run directory.
    Train(TrainArgs),
    /// Ask a running `train` to switch to stage 2 before its next update.
    AdvanceStage {
        /// Run directory of the training process.
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn-tracking experiment; prints the per-cell summary table.
    EvalTurn(EvalTurnArgs),
    /// Dribble-to-target or obstacle-avoidance trials.
    EvalTask(EvalTaskArgs),
    /// Headless scripted-command rollout written to a replay file.
    Play(PlayArgs),
    /// WebSocket tele-operation server.
    Serve(ServeArgs),
    /// Print checkpoint metadata.
    Inspect {
        checkpoint: PathBuf,
        /// Also print the embedded run config.
        #[arg(long)]
        config: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML). Defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Total updates. Unless --stage1-updates is given, the stage-1 share of
    /// the schedule is kept.
    #[arg(long, conflicts_with = "resume")]
    updates: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    stage1_updates: Option<u64>,
    /// Parallel environment lanes.
    #[arg(long, conflicts_with = "resume")]
    lanes: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates in this invocation.
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct PolicySource {
    /// Trained checkpoint to deploy.
    #[arg(long, required_unless_present = "scripted", conflicts_with = "scripted")]
    checkpoint: Option<PathBuf>,
    /// Use the hand-written dribbler instead of a checkpoint.
    #[arg(long)]
    scripted: bool,
    /// Run config for --scripted (ignored with a checkpoint, which carries its own).
    #[arg(long, requires = "scripted")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalTurnArgs {
    #[command(flatten)]
    source: PolicySource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    rollouts: Option<usize>,
    /// Write all trial records as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the ball trajectories as an SVG plot.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    DribbleToTarget,
    ObstacleAvoidance,
}

#[derive(Args)]
struct EvalTaskArgs {
    #[command(flatten)]
    source: PolicySource,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    OpenField,
    DribbleToTarget,
    ObstacleAvoidance,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::OpenField => Scenario::OpenField,
            ScenarioArg::DribbleToTarget => Scenario::DribbleToTarget,
            ScenarioArg::ObstacleAvoidance => Scenario::ObstacleAvoidance,
        }
    }
}

#[derive(Args)]
struct PlayArgs {
    #[command(flatten)]
    source: PolicySource,
    /// Replay file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Seconds to simulate.
    #[arg(long, default_value_t = 20.0)]
    duration: f64,
    /// Timed commands, `t:vx,vy;t:vx,vy;...`.
    #[arg(long, default_value = DEFAULT_COMMAND_SCRIPT)]
    commands: String,
    #[arg(long, value_enum, default_value = "open-field")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    source: PolicySource,
    /// Defaults to the run config's port.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long)]
    rate_hz: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone)]
enum Driver {
    Policy(PolicyController<f32>),
    Scripted(ScriptedDribbler),
}

impl Controller for Driver {
    fn act(&mut self, env: &Env) -> Result<ActionVector, EvalError> {
        match self {
            Driver::Policy(p) => p.act(env),
            Driver::Scripted(s) => s.act(env),
        }
    }
}

fn load_source(src: &PolicySource) -> Result<(Driver, RunConfig)> {
    match &src.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Ok((Driver::Policy(PolicyController::new(ck.policy()?)), ck.run_config()?))
        }
        None => Ok((Driver::Scripted(ScriptedDribbler::default()), load_config(src.config.as_deref())?)),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.validate()?;
    Ok(c)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let start = match &a.resume {
        Some(p) => TrainStart::Resume(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => {
            let mut c = load_config(a.config.as_deref())?;
            if let Some(n) = a.updates {
                let s = &mut c.schedule;
                if a.stage1_updates.is_none() && s.total_updates > 0 {
                    s.stage1_updates = (s.stage1_updates as u128 * n as u128 / s.total_updates as u128) as u64;
                }
                s.total_updates = n;
                s.checkpoint_every = s.checkpoint_every.min(n.max(1));
            }
            if let Some(n) = a.stage1_updates {
                c.schedule.stage1_updates = n;
            }
            if let Some(n) = a.lanes {
                c.ppo.num_lanes = n;
            }
            if let Some(s) = a.seed {
                c.seed = s;
            }
            c.validate()?;
            TrainStart::Fresh(c)
        }
    };
    let opts = TrainOptions { out_dir: a.out.clone(), max_updates: a.max_updates };
    let quiet = a.quiet;
    let report = train_to_dir(start, &opts, |m| {
        if !quiet {
            println!(
                "update {:>5}  stage {}  return {:>8}  step_reward {:>7.4}  kl {:.4}  {:.0} steps/s",
                m.update,
                m.stage,
                m.mean_episode_return.map_or("-".into(), |r| format!("{r:.2}")),
                m.mean_step_reward,
                m.approx_kl,
                m.steps_per_second
            );
        }
    })?;
    if let Some(u) = report.stage_switch_at {
        println!("switched to stage 2 at update {u}");
    }
    println!("{} updates, stage {}, checkpoint {}", report.updates, report.stage, report.latest_checkpoint.display());
    Ok(())
}

fn eval_turn(a: EvalTurnArgs) -> Result<()> {
    let (driver, config) = load_source(&a.source)?;
    let mut spec = config.eval.turn.clone();
    if let Some(r) = a.rollouts {
        spec.rollouts_per_cell = r;
    }
    let trials = run_turn_experiment(&driver, &spec, &config.env, a.seed)?;
    let summary = summarize_turns(&spec, &trials);
    print!("{}", format_turn_summary(&summary));
    if let Some(p) = &a.json {
        write_json(p, &serde_json::json!({ "summary": summary, "trials": trials }))?;
    }
    if let Some(p) = &a.svg {
        std::fs::write(p, trajectories_svg(&spec, &trials)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn eval_task(a: EvalTaskArgs) -> Result<()> {
    let (driver, config) = load_source(&a.source)?;
    let ev = &config.eval;
    let trials = a.trials.unwrap_or(ev.task_trials);
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let (kind, results): (TaskKind, Vec<TaskResult>) = match a.task {
        TaskArg::DribbleToTarget => (
            TaskKind::DribbleToTarget,
            run_dribble_trials(&driver, &config.env, trials, ev.task_command_speed, a.seed, ev.task_randomize)?,
        ),
        TaskArg::ObstacleAvoidance => {
            let task = TaskSpec::obstacle_avoidance();
            let results = (0..trials)
                .map(|i| {
                    let mut src = default_command_source(&task, ev.task_command_speed);
                    evaluate_task(&mut driver.clone(), &mut src, &task, &config.env, a.seed + i as u64, ev.task_randomize)
                })
                .collect::<Result<Vec<_>, _>>()?;
            (TaskKind::ObstacleAvoidance, results)
        }
    };
    for r in &results {
        let why = r.failure_reason.map_or(String::new(), |f| format!("  ({f:?})"));
        println!("seed {:>4}  {}  {:6.2} s{}", r.seed, if r.success { "success" } else { "failure" }, r.elapsed, why);
    }
    let s = summarize_tasks(kind, &results);
    println!("{}: {}/{} succeeded ({:.0}%), mean time {:.2} s", kind.name(), s.successes, s.trials, 100.0 * s.success_rate, s.mean_elapsed);
    if let Some(p) = &a.json {
        write_json(p, &serde_json::json!({ "summary": s, "trials": results }))?;
    }
    Ok(())
}

fn play_cmd(a: PlayArgs) -> Result<()> {
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        bail!("--duration must be positive");
    }
    let (mut driver, config) = load_source(&a.source)?;
    let mut cmds = parse_command_script(&a.commands).map_err(anyhow::Error::msg)?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let s = play(&mut driver, &mut cmds, a.scenario.into(), &config.env, a.seed, a.duration, BufWriter::new(f))?;
    println!(
        "{} steps, total reward {:.2}, ball at ({:.2}, {:.2}); replay in {}",
        s.steps,
        s.total_reward,
        s.final_ball.x,
        s.final_ball.y,
        a.out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let (driver, config) = load_source(&a.source)?;
    let port = a.port.unwrap_or(config.serve.port);
    let opts = ServeOptions {
        bind: format!("{}:{port}", a.bind),
        rate_hz: a.rate_hz.unwrap_or(config.serve.rate_hz),
        disconnect_grace: Duration::from_secs_f64(config.serve.disconnect_grace),
        env: config.env,
        seed: a.seed,
    };
    let handle = spawn_server(driver, opts)?;
    println!("serving on ws://{}", handle.local_addr());
    handle.wait()?;
    Ok(())
}

fn inspect(path: &Path, show_config: bool) -> Result<()> {
    let ck: Checkpoint = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    println!("file            {}", path.display());
    println!("layout version  {}", ck.layout_version);
    println!("layout          {}", ck.layout);
    println!("actor           {} -> {:?} -> {}", ck.actor.input_dim, ck.actor.hidden_dims, ck.actor.output_dim);
    println!("critic          {} -> {:?} -> {}", ck.critic.input_dim, ck.critic.hidden_dims, ck.critic.output_dim);
    println!("parameters      {}", ck.params.len());
    println!("stage           {}", ck.stage);
    println!("update          {}", ck.update);
    println!("env steps       {}", ck.env_steps);
    println!("resumable       {}", !ck.progress_json.is_empty());
    println!("config sha256   {}", hex(&ck.config_digest));
    if show_config {
        println!();
        print!("{}", ck.config_toml);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train(a) => train(a),
        Command::AdvanceStage { out } => {
            if !out.is_dir() {
                bail!("{} is not a run directory", out.display());
            }
            let p = request_stage_advance(&out)?;
            println!("requested stage 2 via {}", p.display());
            Ok(())
        }
        Command::EvalTurn(a) => eval_turn(a),
        Command::EvalTask(a) => eval_task(a),
        Command::Play(a) => play_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Inspect { checkpoint, config } => inspect(&checkpoint, config),
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
