#![allow(dead_code)]

use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dribble_core::env::Env;
use dribble_core::eval::{Controller, EvalError, ScriptedDribbler};
use dribble_core::geom::Vec2;
use dribble_core::interface::serve::{spawn_server, ServeOptions, ServerHandle};
use dribble_core::interface::wire::validate_server_message;
use dribble_core::dynamics::ActionVector;
use serde_json::Value;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

pub fn options(grace_s: f64) -> ServeOptions {
    ServeOptions {
        bind: "127.0.0.1:0".into(),
        disconnect_grace: Duration::from_secs_f64(grace_s),
        ..ServeOptions::default()
    }
}

pub fn start(grace_s: f64) -> ServerHandle {
    spawn_server(ScriptedDribbler::default(), options(grace_s)).expect("server starts")
}

/// Scripted dribbler that logs the command the observation carried at every
/// control step.
#[derive(Clone, Default)]
pub struct Recording {
    inner: ScriptedDribbler,
    pub log: Arc<Mutex<Vec<(Instant, Vec2)>>>,
}

impl Controller for Recording {
    fn act(&mut self, env: &Env) -> Result<ActionVector, EvalError> {
        self.log.lock().unwrap().push((Instant::now(), env.command()));
        self.inner.act(env)
    }
}

pub struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tungstenite::connect(format!("ws://{addr}")).expect("connect");
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
            s.set_nodelay(true).unwrap();
        }
        Self { ws }
    }

    pub fn send(&mut self, text: &str) {
        self.ws.send(Message::text(text)).expect("send");
    }

    pub fn command(&mut self, vx: f64, vy: f64) {
        self.send(&format!(r#"{{"type":"command","vx":{vx},"vy":{vy}}}"#));
    }

    /// Next server message; every one is checked against the catalog.
    pub fn next(&mut self) -> Value {
        loop {
            match self.ws.read().expect("read") {
                Message::Text(t) => {
                    validate_server_message(t.as_str()).unwrap_or_else(|e| panic!("{e}: {t}"));
                    return serde_json::from_str(t.as_str()).unwrap();
                }
                Message::Close(_) => panic!("server closed the connection"),
                _ => {}
            }
        }
    }

    pub fn next_of(&mut self, ty: &str) -> Value {
        for _ in 0..500 {
            let v = self.next();
            if v["type"] == ty {
                return v;
            }
        }
        panic!("no `{ty}` message within 500 messages");
    }

    pub fn next_state(&mut self) -> Value {
        self.next_of("state")
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}

pub fn echo(state: &Value) -> (f64, f64) {
    (state["command"]["vx"].as_f64().unwrap(), state["command"]["vy"].as_f64().unwrap())
}
