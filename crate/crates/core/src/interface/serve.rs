//! Real-time tele-operation server over WebSocket.
//!
//! One simulation thread owns the environment and controller and runs at the
//! control rate on the wall clock. An acceptor thread and one worker per
//! connection move text frames; they talk to the simulation thread only
//! through channels, and every state broadcast is an immutable shared string.
//!
//! The first client to connect (while no controller is present) controls the
//! robot; later clients are read-only spectators.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::env::{layout_descriptor, Env, EnvConfig, EnvError, StageConfig};
use crate::eval::{eval_env_config, Controller, EvalError, TaskMonitor, TaskOutcome};
use crate::geom::Vec2;
use crate::interface::wire::{ClientMessage, Event, RewardSnapshot, Role, Scenario, ServerMessage, StateMessage, PROTOCOL_VERSION};
use crate::randomization::EpisodeParams;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("server i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// e.g. `127.0.0.1:8765`; port 0 picks a free port.
    pub bind: String,
    pub rate_hz: f64,
    /// How long the simulation keeps running after the controller leaves.
    pub disconnect_grace: Duration,
    pub env: EnvConfig,
    pub seed: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8765".into(),
            rate_hz: 25.0,
            disconnect_grace: Duration::from_secs(2),
            env: EnvConfig::default(),
            seed: 0,
        }
    }
}

enum Inbound {
    Connected { id: u64, tx: Sender<Arc<str>> },
    Message { id: u64, msg: ClientMessage },
    Disconnected { id: u64 },
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: JoinHandle<Result<(), ServeError>>,
    acceptor: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops all threads and returns the simulation thread's result.
    pub fn shutdown(self) -> Result<(), ServeError> {
        self.stop.store(true, Ordering::SeqCst);
        self.wait()
    }

    /// Blocks until the server stops (it only stops on error or shutdown).
    pub fn wait(self) -> Result<(), ServeError> {
        let r = self.sim.join().unwrap_or_else(|_| Err(ServeError::Io(std::io::Error::other("simulation thread panicked"))));
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.acceptor.join();
        r
    }
}

/// Binds, then starts the acceptor and simulation threads.
pub fn spawn_server<C: Controller + Send + 'static>(controller: C, opts: ServeOptions) -> Result<ServerHandle, ServeError> {
    if !(opts.rate_hz > 0.0 && opts.rate_hz.is_finite()) {
        return Err(ServeError::Io(std::io::Error::new(ErrorKind::InvalidInput, "rate_hz must be positive")));
    }
    let listener = TcpListener::bind(&opts.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (in_tx, in_rx) = channel();

    let sim = Simulation::new(controller, &opts, in_rx)?;
    let sim_stop = stop.clone();
    let sim = std::thread::Builder::new().name("serve-sim".into()).spawn(move || sim.run(&sim_stop))?;

    let acc_stop = stop.clone();
    let acceptor = std::thread::Builder::new().name("serve-accept".into()).spawn(move || accept_loop(listener, in_tx, acc_stop))?;
    Ok(ServerHandle { addr, stop, sim, acceptor })
}

fn accept_loop(listener: TcpListener, inbox: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                next_id += 1;
                let id = next_id;
                let inbox = inbox.clone();
                let stop = stop.clone();
                let _ = std::thread::Builder::new()
                    .name(format!("serve-client-{id}"))
                    .spawn(move || client_worker(id, stream, inbox, stop));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn client_worker(id: u64, stream: TcpStream, inbox: Sender<Inbound>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(Duration::from_millis(2))).is_err() {
        return;
    }
    let _ = ws.get_ref().set_nodelay(true);
    let (tx, rx) = channel::<Arc<str>>();
    if inbox.send(Inbound::Connected { id, tx }).is_err() {
        return;
    }
    let result = serve_client(id, &mut ws, &rx, &inbox, &stop);
    let _ = inbox.send(Inbound::Disconnected { id });
    if result.is_ok() {
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

fn serve_client(
    id: u64,
    ws: &mut WebSocket<TcpStream>,
    outgoing: &Receiver<Arc<str>>,
    inbox: &Sender<Inbound>,
    stop: &AtomicBool,
) -> Result<(), ()> {
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => match ClientMessage::parse(text.as_str()) {
                Ok(msg) => inbox.send(Inbound::Message { id, msg }).map_err(|_| ())?,
                Err(message) => {
                    let line = ServerMessage::Error { message }.to_line();
                    ws.send(Message::text(line)).map_err(|_| ())?;
                }
            },
            Ok(Message::Binary(_)) => {
                let line = ServerMessage::Error { message: "binary frames are not supported; send JSON text".into() }.to_line();
                ws.send(Message::text(line)).map_err(|_| ())?;
            }
            Ok(Message::Close(_)) => return Err(()),
            Ok(_) => {}
            Err(e) if would_block(&e) => {}
            Err(_) => return Err(()),
        }
        loop {
            match outgoing.try_recv() {
                Ok(line) => ws.send(Message::text(line.as_ref())).map_err(|_| ())?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
    }
}

struct Simulation<C> {
    controller: C,
    env: Env,
    inbox: Receiver<Inbound>,
    clients: BTreeMap<u64, Sender<Arc<str>>>,
    controller_id: Option<u64>,
    controller_left: Option<Instant>,
    client_paused: bool,
    scenario: Scenario,
    monitor: Option<TaskMonitor>,
    reward: RewardSnapshot,
    seq: u64,
    rate_hz: f64,
    grace: Duration,
    v_cmd_max: f64,
}

impl<C: Controller> Simulation<C> {
    fn new(controller: C, opts: &ServeOptions, inbox: Receiver<Inbound>) -> Result<Self, ServeError> {
        let config = eval_env_config(&opts.env, 1e6);
        let env = Env::new(config, StageConfig::stage2(), opts.seed, 0)?;
        let mut sim = Self {
            controller,
            env,
            inbox,
            clients: BTreeMap::new(),
            controller_id: None,
            controller_left: None,
            client_paused: false,
            scenario: Scenario::OpenField,
            monitor: None,
            reward: RewardSnapshot::default(),
            seq: 0,
            rate_hz: opts.rate_hz,
            grace: opts.disconnect_grace,
            v_cmd_max: config.command.v_cmd_max,
        };
        sim.reset(Scenario::OpenField, None)?;
        Ok(sim)
    }

    fn reset(&mut self, scenario: Scenario, target: Option<usize>) -> Result<(), ServeError> {
        let task = scenario.task(target);
        let world = scenario.initial_world(task.as_ref());
        let cmd = self.env.command();
        self.env.set_command_override(Some(cmd));
        self.env.reset_to(world, EpisodeParams::nominal(self.env.config().body))?;
        self.monitor = task.map(|t| TaskMonitor::new(t, 0.0)).transpose()?;
        self.scenario = scenario;
        self.reward = RewardSnapshot::default();
        Ok(())
    }

    fn send_to(&mut self, id: u64, msg: &ServerMessage) {
        if let Some(tx) = self.clients.get(&id) {
            if tx.send(Arc::from(msg.to_line())).is_err() {
                self.clients.remove(&id);
            }
        }
    }

    fn broadcast(&mut self, msg: &ServerMessage) {
        let line: Arc<str> = Arc::from(msg.to_line());
        self.clients.retain(|_, tx| tx.send(line.clone()).is_ok());
    }

    fn running(&self) -> bool {
        if self.client_paused {
            return false;
        }
        match (self.controller_id, self.controller_left) {
            (Some(_), _) => true,
            (None, Some(left)) => left.elapsed() < self.grace,
            (None, None) => false,
        }
    }

    fn handle(&mut self, ev: Inbound) -> Result<(), ServeError> {
        match ev {
            Inbound::Connected { id, tx } => {
                self.clients.insert(id, tx);
                let role = if self.controller_id.is_none() {
                    self.controller_id = Some(id);
                    self.controller_left = None;
                    Role::Controller
                } else {
                    Role::Spectator
                };
                let hello = ServerMessage::Hello {
                    protocol_version: PROTOCOL_VERSION,
                    role,
                    rate_hz: self.rate_hz,
                    dt: self.env.config().dt,
                    v_cmd_max: self.v_cmd_max,
                    layout: layout_descriptor(),
                };
                self.send_to(id, &hello);
            }
            Inbound::Disconnected { id } => {
                self.clients.remove(&id);
                if self.controller_id == Some(id) {
                    self.controller_id = None;
                    self.controller_left = Some(Instant::now());
                }
            }
            Inbound::Message { id, msg } => {
                if self.controller_id != Some(id) {
                    self.send_to(id, &ServerMessage::Error { message: "spectators are read-only".into() });
                    return Ok(());
                }
                match msg {
                    // Latest wins: the override is what the next observation reads.
                    ClientMessage::Command { vx, vy } => self.env.set_command_override(Some(Vec2::new(vx, vy))),
                    ClientMessage::Reset { scenario, target } => {
                        self.reset(scenario, target)?;
                        self.broadcast(&ServerMessage::Event(Event::Reset { t: 0.0, scenario }));
                    }
                    ClientMessage::Pause => self.client_paused = true,
                    ClientMessage::Resume => self.client_paused = false,
                }
            }
        }
        Ok(())
    }

    fn step(&mut self) -> Result<(), ServeError> {
        let action = self.controller.act(&self.env)?;
        let out = self.env.step(action)?;
        self.reward = (&out.reward).into();
        if let Some(m) = self.monitor.as_mut() {
            let before = m.status().outcome;
            if let (None, Some(outcome)) = (before, m.update(self.env.world())) {
                let st = m.status();
                let failure_reason = match outcome {
                    TaskOutcome::Success => None,
                    TaskOutcome::Failure(r) => Some(r),
                };
                let ev = Event::TaskResult {
                    t: self.env.world().t,
                    scenario: self.scenario,
                    success: failure_reason.is_none(),
                    elapsed: st.elapsed,
                    failure_reason,
                };
                self.broadcast(&ServerMessage::Event(ev));
            }
        }
        if out.status.done {
            self.broadcast(&ServerMessage::Event(Event::EpisodeEnd { t: out.status.t, reason: out.status.reason }));
            self.reset(self.scenario, None)?;
        }
        Ok(())
    }

    fn run(mut self, stop: &AtomicBool) -> Result<(), ServeError> {
        let dt = Duration::from_secs_f64(self.env.config().dt);
        let period = Duration::from_secs_f64(1.0 / self.rate_hz);
        let start = Instant::now();
        let mut next_tick = start;
        let mut next_state = start;
        while !stop.load(Ordering::SeqCst) {
            loop {
                match self.inbox.try_recv() {
                    Ok(ev) => self.handle(ev)?,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return Ok(()),
                }
            }
            let now = Instant::now();
            if now >= next_tick {
                let running = self.running();
                if running {
                    self.step()?;
                }
                next_tick += dt;
                if now > next_tick + dt * 5 {
                    next_tick = now + dt;
                }
            }
            if now >= next_state {
                self.seq += 1;
                let task = self.monitor.as_ref().map(|m| m.status());
                let msg = StateMessage::capture(&self.env, self.seq, !self.running(), self.scenario, self.reward, task);
                self.broadcast(&ServerMessage::State(msg));
                next_state += period;
                if now > next_state + period * 5 {
                    next_state = now + period;
                }
            }
            let wake = next_tick.min(next_state);
            let now = Instant::now();
            if wake > now {
                std::thread::sleep((wake - now).min(Duration::from_millis(5)));
            }
        }
        Ok(())
    }
}
