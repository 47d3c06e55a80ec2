//! Vehicle-to-vehicle state exchange and conflict-zone arbitration.
//!
//! Messages travel as newline-delimited JSON, either over loopback TCP or
//! through an in-process bus with seeded loss and latency. Every endpoint
//! keeps only the latest message per sender.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geom::{ControlCommand, Pose2D};
use crate::map::OccupancyGrid;
use crate::pursuit::PurePursuit;
use crate::raycast::cast_ray;
use crate::sim::VehicleId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum V2vError {
    #[error("malformed message: {0}")]
    Parse(String),
    #[error("message is missing required field `{0}`")]
    VersionMismatch(&'static str),
    #[error("message cannot be encoded: {0}")]
    Invalid(String),
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("timed out talking to peer")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for V2vError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            ErrorKind::ConnectionRefused => V2vError::ConnectionRefused(e.to_string()),
            ErrorKind::TimedOut | ErrorKind::WouldBlock => V2vError::Timeout,
            _ => V2vError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Intent {
    Enter,
    Yield,
    Inside,
    Exit,
}

/// A peer seen by the sender, in the sender's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub peer_id: VehicleId,
    pub rel_x: f64,
    pub rel_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct V2VMessage {
    pub sender_id: VehicleId,
    pub timestamp: f64,
    pub objects: Vec<ObjectEntry>,
    pub intent: Intent,
    pub safe_flag: bool,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    sender_id: VehicleId,
    ts: f64,
    objects: Vec<(VehicleId, f64, f64)>,
    intent: Intent,
    safe: bool,
}

const REQUIRED: [&str; 5] = ["sender_id", "ts", "objects", "intent", "safe"];

impl V2VMessage {
    pub fn validate(&self) -> Result<(), String> {
        if !self.timestamp.is_finite() {
            return Err("timestamp is not finite".into());
        }
        for o in &self.objects {
            if o.peer_id == self.sender_id {
                return Err(format!("sender {} lists itself", self.sender_id));
            }
            if !(o.rel_x.is_finite() && o.rel_y.is_finite()) {
                return Err(format!("object {} has a non-finite position", o.peer_id));
            }
        }
        Ok(())
    }
}

/// One JSON object followed by a newline.
pub fn encode(msg: &V2VMessage) -> Result<Vec<u8>, V2vError> {
    msg.validate().map_err(V2vError::Invalid)?;
    let wire = Wire {
        sender_id: msg.sender_id,
        ts: msg.timestamp,
        objects: msg.objects.iter().map(|o| (o.peer_id, o.rel_x, o.rel_y)).collect(),
        intent: msg.intent,
        safe: msg.safe_flag,
    };
    let mut out = serde_json::to_vec(&wire).map_err(|e| V2vError::Invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Decodes one line (a trailing newline is allowed). Unknown fields are ignored.
pub fn decode(bytes: &[u8]) -> Result<V2VMessage, V2vError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| V2vError::Parse(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| V2vError::Parse("expected a JSON object".into()))?;
    if let Some(missing) = REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
        return Err(V2vError::VersionMismatch(missing));
    }
    let wire: Wire = serde_json::from_value(value).map_err(|e| V2vError::Parse(e.to_string()))?;
    let msg = V2VMessage {
        sender_id: wire.sender_id,
        timestamp: wire.ts,
        objects: wire
            .objects
            .into_iter()
            .map(|(peer_id, rel_x, rel_y)| ObjectEntry { peer_id, rel_x, rel_y })
            .collect(),
        intent: wire.intent,
        safe_flag: wire.safe,
    };
    msg.validate().map_err(V2vError::Parse)?;
    Ok(msg)
}

/// Splits a byte stream into lines and decodes each. A bad line yields an
/// error and decoding resumes at the next newline.
#[derive(Debug, Default)]
pub struct MessageReader {
    buf: Vec<u8>,
}

impl MessageReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes of an incomplete trailing line.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn next_message(&mut self) -> Option<Result<V2VMessage, V2vError>> {
        loop {
            let nl = self.buf.iter().position(|&b| b == b'\n')?;
            let line: Vec<u8> = self.buf.drain(..=nl).collect();
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            return Some(decode(&line));
        }
    }
}

impl Iterator for MessageReader {
    type Item = Result<V2VMessage, V2vError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_message()
    }
}

/// Latest message per sender.
#[derive(Debug, Clone)]
pub struct Mailbox {
    staleness_window: f64,
    latest: BTreeMap<VehicleId, V2VMessage>,
}

impl Mailbox {
    pub fn new(staleness_window: f64) -> Self {
        Self {
            staleness_window,
            latest: BTreeMap::new(),
        }
    }

    pub fn staleness_window(&self) -> f64 {
        self.staleness_window
    }

    /// Keeps `msg` unless the stored one from that sender is newer.
    pub fn push(&mut self, msg: V2VMessage) {
        match self.latest.get(&msg.sender_id) {
            Some(old) if old.timestamp > msg.timestamp => {}
            _ => {
                self.latest.insert(msg.sender_id, msg);
            }
        }
    }

    /// Latest message of every sender with `ts > since_ts` and age at most
    /// the staleness window, in sender order.
    pub fn fetch(&self, since_ts: f64, now: f64) -> Vec<V2VMessage> {
        self.latest
            .values()
            .filter(|m| m.timestamp > since_ts && now - m.timestamp <= self.staleness_window)
            .cloned()
            .collect()
    }
}

/// Common interface of the in-process bus handle and the TCP client.
pub trait V2vEndpoint {
    fn publish(&mut self, msg: &V2VMessage) -> Result<(), V2vError>;
    fn fetch(&mut self, since_ts: f64, now: f64) -> Result<Vec<V2VMessage>, V2vError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Probability that a published message is dropped.
    pub loss: f64,
    /// Delivery delay in seconds.
    pub latency: f64,
    pub staleness_window: f64,
    /// Every fetch times out.
    pub blackout: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            loss: 0.0,
            latency: 0.0,
            staleness_window: 0.5,
            blackout: false,
        }
    }
}

/// Deterministic in-process stand-in for the network.
#[derive(Debug, Clone)]
pub struct SimBus {
    config: ChannelConfig,
    mailbox: Mailbox,
    in_flight: Vec<(f64, u64, V2VMessage)>,
    seq: u64,
    rng: ChaCha8Rng,
    dropped: u64,
}

impl SimBus {
    pub fn new(config: ChannelConfig, seed: u64) -> Self {
        Self {
            mailbox: Mailbox::new(config.staleness_window),
            config,
            in_flight: Vec::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropped: 0,
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn publish(&mut self, msg: &V2VMessage) -> Result<(), V2vError> {
        msg.validate().map_err(V2vError::Invalid)?;
        let lost = self.config.loss >= 1.0 || (self.config.loss > 0.0 && self.rng.random::<f64>() < self.config.loss);
        if lost {
            self.dropped += 1;
            return Ok(());
        }
        self.seq += 1;
        self.in_flight
            .push((msg.timestamp + self.config.latency, self.seq, msg.clone()));
        Ok(())
    }

    pub fn fetch(&mut self, since_ts: f64, now: f64) -> Result<Vec<V2VMessage>, V2vError> {
        if self.config.blackout {
            return Err(V2vError::Timeout);
        }
        self.in_flight
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ready = self.in_flight.partition_point(|(t, _, _)| *t <= now);
        for (_, _, m) in self.in_flight.drain(..ready) {
            self.mailbox.push(m);
        }
        Ok(self.mailbox.fetch(since_ts, now))
    }
}

impl V2vEndpoint for SimBus {
    fn publish(&mut self, msg: &V2VMessage) -> Result<(), V2vError> {
        SimBus::publish(self, msg)
    }

    fn fetch(&mut self, since_ts: f64, now: f64) -> Result<Vec<V2VMessage>, V2vError> {
        SimBus::fetch(self, since_ts, now)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Control {
    Pull {
        /// Absent means no lower bound.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        since: Option<f64>,
        now: f64,
    },
    Ok,
    End,
}

/// Loopback TCP server holding one shared mailbox.
///
/// A client line carrying a message is stored and acknowledged with
/// `{"op":"ok"}`. A pull request `{"op":"pull","since":..,"now":..}` is
/// answered by the matching message lines and `{"op":"end"}`. A bad line
/// gets `{"op":"error","message":..}` and the connection stays open.
pub struct V2vServer {
    addr: SocketAddr,
    mailbox: Arc<Mutex<Mailbox>>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl V2vServer {
    /// Binds `addr` (port 0 picks a free port).
    pub fn bind(addr: impl ToSocketAddrs, staleness_window: f64) -> Result<Self, V2vError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let mailbox = Arc::new(Mutex::new(Mailbox::new(staleness_window)));
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let mailbox = Arc::clone(&mailbox);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = stream {
                        let mailbox = Arc::clone(&mailbox);
                        std::thread::spawn(move || serve(stream, mailbox));
                    }
                }
            })
        };
        Ok(Self {
            addr,
            mailbox,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn mailbox(&self) -> Arc<Mutex<Mailbox>> {
        Arc::clone(&self.mailbox)
    }
}

impl Drop for V2vServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop so it sees the flag
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, mailbox: Arc<Mutex<Mailbox>>) {
    let Ok(mut writer) = stream.try_clone() else {
        return;
    };
    let reader = BufReader::new(stream);
    for line in reader.split(b'\n') {
        let Ok(line) = line else { break };
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let reply = handle_line(&line, &mailbox);
        if writer.write_all(&reply).and_then(|_| writer.flush()).is_err() {
            break;
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
}

fn control_line(c: &Control) -> Vec<u8> {
    let mut v = serde_json::to_vec(c).unwrap_or_default();
    v.push(b'\n');
    v
}

fn handle_line(line: &[u8], mailbox: &Mutex<Mailbox>) -> Vec<u8> {
    if let Ok(Control::Pull { since, now }) = serde_json::from_slice::<Control>(line) {
        let since = since.unwrap_or(f64::NEG_INFINITY);
        let msgs = mailbox.lock().map(|m| m.fetch(since, now)).unwrap_or_default();
        let mut out = Vec::new();
        for m in &msgs {
            if let Ok(bytes) = encode(m) {
                out.extend_from_slice(&bytes);
            }
        }
        out.extend_from_slice(&control_line(&Control::End));
        return out;
    }
    match decode(line) {
        Ok(msg) => {
            if let Ok(mut m) = mailbox.lock() {
                m.push(msg);
            }
            control_line(&Control::Ok)
        }
        Err(e) => {
            let mut v = serde_json::to_vec(&serde_json::json!({"op": "error", "message": e.to_string()})).unwrap_or_default();
            v.push(b'\n');
            v
        }
    }
}

/// Blocking client: every call waits for the server's reply.
pub struct V2vClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl V2vClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, V2vError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    fn read_line(&mut self) -> Result<Vec<u8>, V2vError> {
        let mut line = Vec::new();
        let n = self.reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            return Err(V2vError::Io("connection closed".into()));
        }
        Ok(line)
    }

    /// Sends a raw line; used to probe server behaviour with bad input.
    pub fn send_raw(&mut self, line: &[u8]) -> Result<Vec<u8>, V2vError> {
        self.writer.write_all(line)?;
        self.writer.flush()?;
        self.read_line()
    }
}

impl V2vEndpoint for V2vClient {
    fn publish(&mut self, msg: &V2VMessage) -> Result<(), V2vError> {
        let reply = self.send_raw(&encode(msg)?)?;
        match serde_json::from_slice::<Control>(&reply) {
            Ok(Control::Ok) => Ok(()),
            _ => Err(V2vError::Parse(String::from_utf8_lossy(&reply).trim().to_string())),
        }
    }

    fn fetch(&mut self, since_ts: f64, now: f64) -> Result<Vec<V2VMessage>, V2vError> {
        let since = since_ts.is_finite().then_some(since_ts);
        self.writer.write_all(&control_line(&Control::Pull { since, now }))?;
        self.writer.flush()?;
        let mut out = Vec::new();
        loop {
            let line = self.read_line()?;
            if let Ok(Control::End) = serde_json::from_slice::<Control>(&line) {
                return Ok(out);
            }
            out.push(decode(&line)?);
        }
    }
}

/// Circular region admitting at most `capacity` vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictZone {
    pub center: Pose2D,
    pub entry_radius: f64,
    pub inner_radius: f64,
    #[serde(default = "one")]
    pub capacity: usize,
}

fn one() -> usize {
    1
}

impl ConflictZone {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.inner_radius >= 0.0 && self.inner_radius < self.entry_radius) {
            return Err("zone needs 0 <= inner_radius < entry_radius".into());
        }
        if self.capacity < 1 {
            return Err("zone capacity must be at least 1".into());
        }
        Ok(())
    }

    pub fn distance(&self, x: f64, y: f64) -> f64 {
        (x - self.center.x).hypot(y - self.center.y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.distance(x, y) < self.entry_radius
    }
}

/// Whether the ego may enter given its peers' latest messages. Peers
/// inside block; among simultaneous ENTER requests the lower id wins.
pub fn safe_to_proceed(ego_id: VehicleId, _ego_intent: Intent, peers: &[V2VMessage], zone: &ConflictZone) -> bool {
    let others = peers.iter().filter(|m| m.sender_id != ego_id);
    let mut ahead = 0;
    for m in others {
        match m.intent {
            Intent::Inside => return false,
            Intent::Enter if m.sender_id < ego_id => ahead += 1,
            _ => {}
        }
    }
    ahead < zone.capacity
}

/// Peers the ego can see directly, in the ego frame.
pub fn visible_objects(grid: &OccupancyGrid, ego: &Pose2D, peers: &[(VehicleId, Pose2D)], range: f64, march_step: f64) -> Vec<ObjectEntry> {
    peers
        .iter()
        .filter_map(|(id, p)| {
            let d = ego.distance_to(p);
            if d > range {
                return None;
            }
            let bearing = (p.y - ego.y).atan2(p.x - ego.x);
            (cast_ray(grid, ego, bearing, d, march_step) >= d).then(|| {
                let (rel_x, rel_y) = ego.point_to_local(p.x, p.y);
                ObjectEntry { peer_id: *id, rel_x, rel_y }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    /// Cleared to enter and past the point where braking before the line is possible.
    Committed,
    Inside,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundaboutConfig {
    /// Stop line distance outside the entry radius.
    pub stop_margin: f64,
    /// Braking deceleration used to approach the stop line.
    pub brake_decel: f64,
    /// Speed-zero distance before the end of the route.
    pub end_margin: f64,
}

impl Default for RoundaboutConfig {
    fn default() -> Self {
        Self {
            stop_margin: 0.3,
            brake_decel: 2.0,
            end_margin: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundaboutDecision {
    pub command: ControlCommand,
    pub intent: Intent,
    pub safe: bool,
    pub holding: bool,
}

/// Pure pursuit along a fixed route through the zone, gated by V2V
/// arbitration at the stop line.
#[derive(Debug, Clone)]
pub struct RoundaboutController {
    pub id: VehicleId,
    pub tracker: PurePursuit,
    pub zone: ConflictZone,
    pub config: RoundaboutConfig,
    roster: Vec<VehicleId>,
    phase: Phase,
    stop_arc: Option<f64>,
    link_up: bool,
}

impl RoundaboutController {
    /// `roster` lists every participant; any of them missing from a fetch
    /// counts as unknown and forces a yield.
    pub fn new(id: VehicleId, tracker: PurePursuit, zone: ConflictZone, roster: Vec<VehicleId>, config: RoundaboutConfig) -> Self {
        let stop_arc = first_arc_within(&tracker, &zone, zone.entry_radius + config.stop_margin);
        Self {
            id,
            tracker,
            zone,
            config,
            roster,
            phase: Phase::Approach,
            stop_arc,
            link_up: true,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn stop_arc(&self) -> Option<f64> {
        self.stop_arc
    }

    /// Intent to broadcast for the current phase.
    pub fn intent(&self) -> Intent {
        match self.phase {
            Phase::Approach if self.link_up => Intent::Enter,
            Phase::Approach => Intent::Yield,
            Phase::Committed | Phase::Inside => Intent::Inside,
            Phase::Exited => Intent::Exit,
        }
    }

    /// Advances the phase from the ground-truth position.
    pub fn observe(&mut self, pose: &Pose2D) {
        let inside = self.zone.contains(pose.x, pose.y);
        self.phase = match (self.phase, inside) {
            (Phase::Approach | Phase::Committed, true) => Phase::Inside,
            (Phase::Inside, false) => Phase::Exited,
            (p, _) => p,
        };
    }

    /// Builds this step's outgoing message.
    pub fn message(&self, now: f64, objects: Vec<ObjectEntry>, safe: bool) -> V2VMessage {
        V2VMessage {
            sender_id: self.id,
            timestamp: now,
            objects,
            intent: self.intent(),
            safe_flag: safe,
        }
    }

    pub fn decide(&mut self, pose: &Pose2D, v: f64, peers: Result<Vec<V2VMessage>, V2vError>, dt: f64) -> RoundaboutDecision {
        let (_, mut cmd) = self.tracker.command(pose);
        let arc = self.tracker.last_projection().map_or(0.0, |p| p.arc);

        let known = match &peers {
            Ok(msgs) => self
                .roster
                .iter()
                .filter(|&&r| r != self.id)
                .all(|r| msgs.iter().any(|m| m.sender_id == *r)),
            Err(_) => false,
        };
        self.link_up = known;
        let safe = known
            && peers
                .as_ref()
                .map(|m| safe_to_proceed(self.id, self.intent(), m, &self.zone))
                .unwrap_or(false);

        let mut holding = false;
        if self.phase == Phase::Approach {
            if let Some(stop_arc) = self.stop_arc {
                let to_line = stop_arc - arc;
                let a = self.config.brake_decel;
                let commit_dist = v * v / (2.0 * a) + 2.0 * v * dt + 0.05;
                if safe && to_line <= commit_dist {
                    self.phase = Phase::Committed;
                } else if !safe {
                    holding = true;
                    let v_line = if to_line <= 0.02 {
                        0.0
                    } else {
                        (2.0 * a * (to_line - 0.02)).sqrt()
                    };
                    cmd.speed = cmd.speed.min(v_line);
                }
            }
        }
        if !self.tracker.path.is_closed() && arc >= self.tracker.path.length() - self.config.end_margin {
            cmd.speed = 0.0;
        }
        RoundaboutDecision {
            command: cmd,
            intent: self.intent(),
            safe,
            holding,
        }
    }
}

/// Arc length at which the route first comes within `radius` of the zone centre.
fn first_arc_within(tracker: &PurePursuit, zone: &ConflictZone, radius: f64) -> Option<f64> {
    let path = &tracker.path;
    let len = path.length();
    let step = 0.01;
    let n = (len / step).ceil() as usize;
    (0..=n).map(|i| (i as f64 * step).min(len)).find(|&s| {
        path.sample_at(s)
            .is_some_and(|(x, y, _, _)| zone.distance(x, y) <= radius)
    })
}
