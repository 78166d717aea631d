//! Interface exchange between workers.
//!
//! Every message is an [`Envelope`] identified by (epoch, edge, kind,
//! sender); that key must be unique within a run, which is what lets
//! receivers match messages deterministically no matter the arrival order.
//! [`Transport::isend`] never blocks on the peer, [`Transport::irecv`] only
//! posts an expectation, and [`Transport::wait_all`] completes the posted
//! expectations in posting order or reports the unmatched ones after a
//! timeout.
//!
//! Two implementations ship: an in-process hub where worker threads share
//! mailboxes (with an optional delivery fuzzer for stress tests), and a TCP
//! mesh with one process per rank, bootstrapped from a rank-0 rendezvous
//! socket.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::derive_seed;
use crate::{Error, Result};

/// Rank value meaning "no neighbor": sends and receives against it are
/// no-ops.
pub const NULL_RANK: u32 = u32::MAX;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const MAX_PAYLOAD: u32 = 1 << 24;

/// What a payload contains, and one third of the matching key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Solution,
    Flux,
    Residual,
}

impl PayloadKind {
    pub fn label(self) -> &'static str {
        match self {
            PayloadKind::Solution => "solution",
            PayloadKind::Flux => "flux",
            PayloadKind::Residual => "residual",
        }
    }

    fn code(self) -> u8 {
        match self {
            PayloadKind::Solution => 0,
            PayloadKind::Flux => 1,
            PayloadKind::Residual => 2,
        }
    }

    fn from_code(code: u8) -> Option<PayloadKind> {
        match code {
            0 => Some(PayloadKind::Solution),
            1 => Some(PayloadKind::Flux),
            2 => Some(PayloadKind::Residual),
            _ => None,
        }
    }
}

type Key = (u64, u32, PayloadKind, u32);

/// One interface message. Payloads hold plain numbers, field-major: all
/// points of the first field (or equation), then the next.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub epoch: u64,
    pub edge: u32,
    pub kind: PayloadKind,
    pub sender: u32,
    pub payload: Vec<f64>,
}

impl Envelope {
    fn key(&self) -> Key {
        (self.epoch, self.edge, self.kind, self.sender)
    }

    fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        write_frame(w, self.epoch, self.edge, self.kind.code(), self.sender, &self.payload)
    }
}

const HEADER_LEN: usize = 21;
const CODE_BARRIER: u8 = 254;
const CODE_BARRIER_OK: u8 = 255;

fn write_frame(
    w: &mut impl Write,
    epoch: u64,
    edge: u32,
    code: u8,
    sender: u32,
    payload: &[f64],
) -> io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * payload.len());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&edge.to_le_bytes());
    buf.push(code);
    buf.extend_from_slice(&sender.to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

enum Frame {
    Data(Envelope),
    Barrier { generation: u64 },
    BarrierOk { generation: u64 },
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let epoch = u64::from_le_bytes(header[0..8].try_into().unwrap());
    let edge = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let code = header[12];
    let sender = u32::from_le_bytes(header[13..17].try_into().unwrap());
    let len = u32::from_le_bytes(header[17..21].try_into().unwrap());
    match code {
        CODE_BARRIER => return Ok(Some(Frame::Barrier { generation: epoch })),
        CODE_BARRIER_OK => return Ok(Some(Frame::BarrierOk { generation: epoch })),
        _ => {}
    }
    let kind = PayloadKind::from_code(code)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unknown frame code {code}")))?;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("payload of {len} values exceeds the {MAX_PAYLOAD} cap"),
        ));
    }
    let mut bytes = vec![0u8; 8 * len as usize];
    r.read_exact(&mut bytes)?;
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(Frame::Data(Envelope { epoch, edge, kind, sender, payload })))
}

/// What a posted receive is waiting for.
#[derive(Clone, Copy, Debug)]
pub struct Expect {
    pub from: u32,
    pub epoch: u64,
    pub edge: u32,
    pub kind: PayloadKind,
}

impl Expect {
    fn key(&self) -> Key {
        (self.epoch, self.edge, self.kind, self.from)
    }

    fn describe(&self) -> String {
        format!("epoch {} edge {} {} from rank {}", self.epoch, self.edge, self.kind.label(), self.from)
    }
}

/// Messages sent and received through one endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub sent: u64,
    pub received: u64,
}

/// Non-blocking point-to-point exchange plus a barrier, behind one
/// interface so runs can pick the wiring at startup.
pub trait Transport: Send {
    fn rank(&self) -> u32;
    fn world(&self) -> u32;
    /// Queues `envelope` for delivery to `to`; never waits for the peer.
    fn isend(&mut self, to: u32, envelope: Envelope) -> Result<()>;
    /// Posts an expectation to be completed by the next `wait_all`.
    fn irecv(&mut self, want: Expect) -> Result<()>;
    /// Completes all posted expectations, in posting order.
    fn wait_all(&mut self) -> Result<Vec<Envelope>>;
    /// Blocks until every rank reaches the same barrier call.
    fn barrier(&mut self) -> Result<()>;
    fn counters(&self) -> Counters;
}

// ---------------------------------------------------------------------------
// Mailbox: arrival buffer shared by both transports.

#[derive(Default)]
struct MailboxInner {
    held: BTreeMap<Key, Envelope>,
    /// First protocol violation observed, surfaced to the next reader.
    fault: Option<(u64, u32, String)>,
}

struct Mailbox {
    inner: Mutex<MailboxInner>,
    arrived: Condvar,
}

impl Mailbox {
    fn new() -> Self {
        Mailbox { inner: Mutex::new(MailboxInner::default()), arrived: Condvar::new() }
    }

    /// Files an envelope under its key. A second envelope with the same key
    /// poisons the mailbox: uniqueness of (epoch, edge, kind, sender) is
    /// what makes matching unambiguous.
    fn deposit(&self, envelope: Envelope) {
        let mut inner = self.inner.lock().unwrap();
        let key = envelope.key();
        if inner.held.contains_key(&key) {
            inner.fault.get_or_insert((
                envelope.epoch,
                envelope.edge,
                format!("duplicate {} envelope from rank {}", envelope.kind.label(), envelope.sender),
            ));
        } else {
            inner.held.insert(key, envelope);
        }
        self.arrived.notify_all();
    }

    /// Removes the envelope under `key`, waiting until `deadline` for it to
    /// arrive. `Ok(None)` means timeout; errors report a poisoned channel.
    fn take(&self, key: Key, deadline: Instant) -> Result<Option<Envelope>> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if let Some((epoch, edge, msg)) = &inner.fault {
                return Err(Error::Protocol { epoch: *epoch, edge: *edge, msg: msg.clone() });
            }
            if let Some(env) = inner.held.remove(&key) {
                return Ok(Some(env));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let (guard, _) = self.arrived.wait_timeout(inner, deadline - now).unwrap();
            inner = guard;
        }
    }

    fn is_absent(&self, key: Key) -> bool {
        !self.inner.lock().unwrap().held.contains_key(&key)
    }
}

fn deadlock_report(timeout: Duration, mailbox: &Mailbox, pending: &[Expect]) -> Error {
    let unmatched: Vec<String> = pending
        .iter()
        .filter(|w| mailbox.is_absent(w.key()))
        .map(Expect::describe)
        .collect();
    Error::Deadlock { timeout_s: timeout.as_secs_f64(), unmatched: unmatched.join("; ") }
}

// ---------------------------------------------------------------------------
// In-process hub.

struct BarrierState {
    arrived: u32,
    generation: u64,
}

struct HubShared {
    boxes: Vec<Mailbox>,
    barrier: Mutex<BarrierState>,
    barrier_cv: Condvar,
    sent: Vec<AtomicU64>,
    received: Vec<AtomicU64>,
    fuzz_max_us: u64,
}

/// Shared-memory exchange for the threads-in-one-process mode. Create one
/// hub, hand each worker thread its [`Hub::endpoint`].
pub struct Hub {
    shared: Arc<HubShared>,
    world: u32,
}

impl Hub {
    pub fn new(world: u32) -> Hub {
        Hub::with_fuzz(world, 0)
    }

    /// Like [`Hub::new`], but each send is delivered from a detached thread
    /// after a random delay of up to `max_delay_us` microseconds, so arrival
    /// order is scrambled.
    pub fn with_fuzz(world: u32, max_delay_us: u64) -> Hub {
        assert!(world >= 1, "a hub needs at least one rank");
        let shared = HubShared {
            boxes: (0..world).map(|_| Mailbox::new()).collect(),
            barrier: Mutex::new(BarrierState { arrived: 0, generation: 0 }),
            barrier_cv: Condvar::new(),
            sent: (0..world).map(|_| AtomicU64::new(0)).collect(),
            received: (0..world).map(|_| AtomicU64::new(0)).collect(),
            fuzz_max_us: max_delay_us,
        };
        Hub { shared: Arc::new(shared), world }
    }

    pub fn world(&self) -> u32 {
        self.world
    }

    /// The endpoint worker `rank` communicates through.
    pub fn endpoint(&self, rank: u32) -> InProcess {
        assert!(rank < self.world, "rank {rank} outside world of {}", self.world);
        InProcess {
            shared: Arc::clone(&self.shared),
            rank,
            world: self.world,
            pending: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(0x6875_625f_6675_7a7a, rank as u64)),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Per-rank message counters, for conservation checks.
    pub fn stats(&self) -> Vec<Counters> {
        (0..self.world as usize)
            .map(|r| Counters {
                sent: self.shared.sent[r].load(Ordering::Relaxed),
                received: self.shared.received[r].load(Ordering::Relaxed),
            })
            .collect()
    }
}

/// One worker's view of the [`Hub`].
pub struct InProcess {
    shared: Arc<HubShared>,
    rank: u32,
    world: u32,
    pending: Vec<Expect>,
    rng: ChaCha8Rng,
    timeout: Duration,
}

impl InProcess {
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

impl Transport for InProcess {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world(&self) -> u32 {
        self.world
    }

    fn isend(&mut self, to: u32, envelope: Envelope) -> Result<()> {
        if to == NULL_RANK {
            return Ok(());
        }
        if to >= self.world {
            return Err(Error::rejected(format!(
                "send target rank {to} outside world of {}",
                self.world
            )));
        }
        self.shared.sent[self.rank as usize].fetch_add(1, Ordering::Relaxed);
        if self.shared.fuzz_max_us > 0 {
            let delay = Duration::from_micros(self.rng.gen_range(0..=self.shared.fuzz_max_us));
            let shared = Arc::clone(&self.shared);
            std::thread::spawn(move || {
                std::thread::sleep(delay);
                shared.boxes[to as usize].deposit(envelope);
            });
        } else {
            self.shared.boxes[to as usize].deposit(envelope);
        }
        Ok(())
    }

    fn irecv(&mut self, want: Expect) -> Result<()> {
        if want.from == NULL_RANK {
            return Ok(());
        }
        if want.from >= self.world {
            return Err(Error::rejected(format!(
                "receive source rank {} outside world of {}",
                want.from, self.world
            )));
        }
        self.pending.push(want);
        Ok(())
    }

    fn wait_all(&mut self) -> Result<Vec<Envelope>> {
        let deadline = Instant::now() + self.timeout;
        let pending = std::mem::take(&mut self.pending);
        let mailbox = &self.shared.boxes[self.rank as usize];
        let mut out = Vec::with_capacity(pending.len());
        for (i, want) in pending.iter().enumerate() {
            match mailbox.take(want.key(), deadline)? {
                Some(env) => {
                    self.shared.received[self.rank as usize].fetch_add(1, Ordering::Relaxed);
                    out.push(env);
                }
                None => return Err(deadlock_report(self.timeout, mailbox, &pending[i..])),
            }
        }
        Ok(out)
    }

    fn barrier(&mut self) -> Result<()> {
        let mut state = self.shared.barrier.lock().unwrap();
        let generation = state.generation;
        state.arrived += 1;
        if state.arrived == self.world {
            state.arrived = 0;
            state.generation += 1;
            self.shared.barrier_cv.notify_all();
            return Ok(());
        }
        let deadline = Instant::now() + self.timeout;
        while state.generation == generation {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Deadlock {
                    timeout_s: self.timeout.as_secs_f64(),
                    unmatched: format!(
                        "barrier generation {generation}: {} of {} ranks arrived",
                        state.arrived, self.world
                    ),
                });
            }
            let (guard, _) = self.shared.barrier_cv.wait_timeout(state, deadline - now).unwrap();
            state = guard;
        }
        Ok(())
    }

    fn counters(&self) -> Counters {
        Counters {
            sent: self.shared.sent[self.rank as usize].load(Ordering::Relaxed),
            received: self.shared.received[self.rank as usize].load(Ordering::Relaxed),
        }
    }
}

// ---------------------------------------------------------------------------
// Socket mesh.

#[derive(Default)]
struct BarrierTally {
    /// generation -> number of Barrier frames seen (rank 0 only).
    arrived: BTreeMap<u64, u32>,
    /// Latest BarrierOk generation (ranks > 0).
    released: Option<u64>,
}

/// One process per rank, fully meshed over TCP. Rank 0 additionally hosts
/// the rendezvous socket that bootstraps the mesh and coordinates barriers.
pub struct SocketTransport {
    rank: u32,
    world: u32,
    mailbox: Arc<Mailbox>,
    barrier_tally: Arc<(Mutex<BarrierTally>, Condvar)>,
    /// Write halves, indexed by peer rank (`None` at our own slot).
    peers: Vec<Option<TcpStream>>,
    pending: Vec<Expect>,
    generation: u64,
    sent: u64,
    received: u64,
    timeout: Duration,
    readers: Vec<JoinHandle<()>>,
}

fn startup_err(stage: &str, e: impl std::fmt::Display) -> Error {
    Error::Startup(format!("{stage}: {e}"))
}

fn write_rendezvous_hello(stream: &mut TcpStream, rank: u32, addr: &str) -> io::Result<()> {
    stream.write_all(&rank.to_le_bytes())?;
    stream.write_all(&(addr.len() as u32).to_le_bytes())?;
    stream.write_all(addr.as_bytes())
}

fn read_exact_timeout(stream: &mut TcpStream, buf: &mut [u8]) -> io::Result<()> {
    stream.read_exact(buf)
}

fn read_u32(stream: &mut TcpStream) -> io::Result<u32> {
    let mut b = [0u8; 4];
    read_exact_timeout(stream, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(stream: &mut TcpStream) -> io::Result<String> {
    let len = read_u32(stream)? as usize;
    if len > 4096 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "address string too long"));
    }
    let mut b = vec![0u8; len];
    read_exact_timeout(stream, &mut b)?;
    String::from_utf8(b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

impl SocketTransport {
    /// Joins (or, for rank 0, hosts) the rendezvous at `rendezvous`, builds
    /// the mesh, and starts reader threads. Rank 0 prints the bound
    /// rendezvous address so launchers can pick port 0 and read it back.
    pub fn connect(rank: u32, world: u32, rendezvous: &str) -> Result<SocketTransport> {
        if world == 0 || rank >= world {
            return Err(Error::rejected(format!("rank {rank} outside world of {world}")));
        }

        let data_listener = TcpListener::bind("127.0.0.1:0").map_err(|e| startup_err("data listener", e))?;
        let my_addr = data_listener
            .local_addr()
            .map_err(|e| startup_err("data listener", e))?
            .to_string();

        // Learn every rank's data address through the rendezvous.
        let table: Vec<String> = if rank == 0 {
            let listener =
                TcpListener::bind(rendezvous).map_err(|e| startup_err("rendezvous bind", e))?;
            let bound = listener.local_addr().map_err(|e| startup_err("rendezvous bind", e))?;
            println!("rendezvous listening at {bound}");
            let mut table = vec![String::new(); world as usize];
            table[0] = my_addr.clone();
            let mut joined: Vec<TcpStream> = Vec::new();
            for _ in 1..world {
                let (mut stream, _) = listener.accept().map_err(|e| startup_err("rendezvous accept", e))?;
                stream
                    .set_read_timeout(Some(DEFAULT_TIMEOUT))
                    .map_err(|e| startup_err("rendezvous accept", e))?;
                let peer = read_u32(&mut stream).map_err(|e| startup_err("rendezvous hello", e))?;
                let addr = read_string(&mut stream).map_err(|e| startup_err("rendezvous hello", e))?;
                if peer == 0 || peer >= world || !table[peer as usize].is_empty() {
                    return Err(Error::Startup(format!("rendezvous hello from invalid rank {peer}")));
                }
                table[peer as usize] = addr;
                joined.push(stream);
            }
            // Everyone has registered; broadcast the table.
            for stream in &mut joined {
                stream
                    .write_all(&world.to_le_bytes())
                    .and_then(|_| {
                        for addr in &table {
                            stream.write_all(&(addr.len() as u32).to_le_bytes())?;
                            stream.write_all(addr.as_bytes())?;
                        }
                        Ok(())
                    })
                    .map_err(|e| startup_err("rendezvous broadcast", e))?;
            }
            table
        } else {
            let mut stream = connect_with_retry(rendezvous, DEFAULT_TIMEOUT)
                .map_err(|e| startup_err("rendezvous connect", e))?;
            stream
                .set_read_timeout(Some(DEFAULT_TIMEOUT))
                .map_err(|e| startup_err("rendezvous connect", e))?;
            write_rendezvous_hello(&mut stream, rank, &my_addr)
                .map_err(|e| startup_err("rendezvous hello", e))?;
            let n = read_u32(&mut stream).map_err(|e| startup_err("rendezvous table", e))?;
            if n != world {
                return Err(Error::Startup(format!(
                    "rendezvous reported world {n}, this rank was launched with {world}"
                )));
            }
            let mut table = Vec::with_capacity(world as usize);
            for _ in 0..world {
                table.push(read_string(&mut stream).map_err(|e| startup_err("rendezvous table", e))?);
            }
            table
        };

        // Mesh: higher ranks dial lower ranks; each connection starts with
        // the dialer's rank so the acceptor can label it.
        let mut peers: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        for lower in 0..rank {
            let mut stream = connect_with_retry(&table[lower as usize], DEFAULT_TIMEOUT)
                .map_err(|e| startup_err("mesh connect", e))?;
            stream.write_all(&rank.to_le_bytes()).map_err(|e| startup_err("mesh hello", e))?;
            stream.set_nodelay(true).ok();
            peers[lower as usize] = Some(stream);
        }
        for _ in rank + 1..world {
            let (mut stream, _) = data_listener.accept().map_err(|e| startup_err("mesh accept", e))?;
            stream
                .set_read_timeout(Some(DEFAULT_TIMEOUT))
                .map_err(|e| startup_err("mesh accept", e))?;
            let peer = read_u32(&mut stream).map_err(|e| startup_err("mesh hello", e))?;
            if peer <= rank || peer >= world || peers[peer as usize].is_some() {
                return Err(Error::Startup(format!("mesh hello from invalid rank {peer}")));
            }
            stream.set_read_timeout(None).map_err(|e| startup_err("mesh accept", e))?;
            stream.set_nodelay(true).ok();
            peers[peer as usize] = Some(stream);
        }

        let mailbox = Arc::new(Mailbox::new());
        let barrier_tally = Arc::new((Mutex::new(BarrierTally::default()), Condvar::new()));
        let mut readers = Vec::new();
        for (peer, slot) in peers.iter().enumerate() {
            let Some(stream) = slot else { continue };
            let mut stream = stream.try_clone().map_err(|e| startup_err("reader spawn", e))?;
            let mailbox = Arc::clone(&mailbox);
            let tally = Arc::clone(&barrier_tally);
            let handle = std::thread::Builder::new()
                .name(format!("recv-from-{peer}"))
                .spawn(move || reader_loop(&mut stream, &mailbox, &tally))
                .map_err(|e| startup_err("reader spawn", e))?;
            readers.push(handle);
        }

        Ok(SocketTransport {
            rank,
            world,
            mailbox,
            barrier_tally,
            peers,
            pending: Vec::new(),
            generation: 0,
            sent: 0,
            received: 0,
            timeout: DEFAULT_TIMEOUT,
            readers,
        })
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn stream_to(&mut self, to: u32) -> Result<&mut TcpStream> {
        self.peers
            .get_mut(to as usize)
            .and_then(|s| s.as_mut())
            .ok_or_else(|| Error::rejected(format!("no mesh connection to rank {to}")))
    }
}

fn connect_with_retry(addr: &str, budget: Duration) -> io::Result<TcpStream> {
    let deadline = Instant::now() + budget;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(e);
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn reader_loop(stream: &mut TcpStream, mailbox: &Mailbox, tally: &(Mutex<BarrierTally>, Condvar)) {
    loop {
        match read_frame(stream) {
            Ok(Some(Frame::Data(envelope))) => mailbox.deposit(envelope),
            Ok(Some(Frame::Barrier { generation })) => {
                let mut t = tally.0.lock().unwrap();
                *t.arrived.entry(generation).or_insert(0) += 1;
                tally.1.notify_all();
            }
            Ok(Some(Frame::BarrierOk { generation })) => {
                let mut t = tally.0.lock().unwrap();
                t.released = Some(t.released.map_or(generation, |g| g.max(generation)));
                tally.1.notify_all();
            }
            Ok(None) => return, // peer closed
            Err(_) => return,   // torn stream; outstanding waits will time out
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world(&self) -> u32 {
        self.world
    }

    fn isend(&mut self, to: u32, envelope: Envelope) -> Result<()> {
        if to == NULL_RANK {
            return Ok(());
        }
        if to >= self.world {
            return Err(Error::rejected(format!(
                "send target rank {to} outside world of {}",
                self.world
            )));
        }
        self.sent += 1;
        if to == self.rank {
            self.mailbox.deposit(envelope);
            return Ok(());
        }
        let stream = self.stream_to(to)?;
        envelope.write_to(stream)?;
        Ok(())
    }

    fn irecv(&mut self, want: Expect) -> Result<()> {
        if want.from == NULL_RANK {
            return Ok(());
        }
        if want.from >= self.world {
            return Err(Error::rejected(format!(
                "receive source rank {} outside world of {}",
                want.from, self.world
            )));
        }
        self.pending.push(want);
        Ok(())
    }

    fn wait_all(&mut self) -> Result<Vec<Envelope>> {
        let deadline = Instant::now() + self.timeout;
        let pending = std::mem::take(&mut self.pending);
        let mut out = Vec::with_capacity(pending.len());
        for (i, want) in pending.iter().enumerate() {
            match self.mailbox.take(want.key(), deadline)? {
                Some(env) => {
                    self.received += 1;
                    out.push(env);
                }
                None => return Err(deadlock_report(self.timeout, &self.mailbox, &pending[i..])),
            }
        }
        Ok(out)
    }

    fn barrier(&mut self) -> Result<()> {
        let generation = self.generation;
        self.generation += 1;
        let deadline = Instant::now() + self.timeout;
        if self.rank == 0 {
            // Wait for everyone's Barrier frame, then release them all.
            {
                let (lock, cv) = &*self.barrier_tally;
                let mut tally = lock.lock().unwrap();
                while tally.arrived.get(&generation).copied().unwrap_or(0) < self.world - 1 {
                    let now = Instant::now();
                    if now >= deadline {
                        let seen = tally.arrived.get(&generation).copied().unwrap_or(0);
                        return Err(Error::Deadlock {
                            timeout_s: self.timeout.as_secs_f64(),
                            unmatched: format!(
                                "barrier generation {generation}: {} of {} ranks arrived",
                                seen + 1,
                                self.world
                            ),
                        });
                    }
                    let (guard, _) = cv.wait_timeout(tally, deadline - now).unwrap();
                    tally = guard;
                }
                tally.arrived.remove(&generation);
            }
            for peer in 1..self.world {
                let stream = self.stream_to(peer)?;
                write_frame(stream, generation, 0, CODE_BARRIER_OK, 0, &[])?;
            }
        } else {
            {
                let rank = self.rank;
                let stream = self.stream_to(0)?;
                write_frame(stream, generation, 0, CODE_BARRIER, rank, &[])?;
            }
            let (lock, cv) = &*self.barrier_tally;
            let mut tally = lock.lock().unwrap();
            while tally.released.map_or(true, |g| g < generation) {
                let now = Instant::now();
                if now >= deadline {
                    return Err(Error::Deadlock {
                        timeout_s: self.timeout.as_secs_f64(),
                        unmatched: format!("barrier generation {generation}: no release from rank 0"),
                    });
                }
                let (guard, _) = cv.wait_timeout(tally, deadline - now).unwrap();
                tally = guard;
            }
        }
        Ok(())
    }

    fn counters(&self) -> Counters {
        Counters { sent: self.sent, received: self.received }
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        // Closing the write halves lets peer readers see EOF and exit; then
        // collect our own readers.
        for slot in &mut self.peers {
            if let Some(stream) = slot.take() {
                stream.shutdown(std::net::Shutdown::Both).ok();
            }
        }
        for handle in self.readers.drain(..) {
            handle.join().ok();
        }
    }
}
