//! UDP datagrams and length-prefixed TCP frame streams behind the same
//! `Transport` trait the simulator implements.
//!
//! A stream starts with a two-byte preamble carrying the opener's listen
//! port, so the acceptor can name the peer by its advertised endpoint
//! rather than an ephemeral source port. Each frame is a big-endian `u32`
//! length followed by that many bytes.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use netsim::{EndpointAddr, NetError, SimTime, StreamEvent, StreamId, Transport, MAX_DATAGRAM};

/// Frames above this size close the stream.
pub const MAX_FRAME: usize = 4 * 1024 * 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

enum Out {
    Frame(Vec<u8>),
    Close,
}

pub struct RealTransport {
    advertise: EndpointAddr,
    udp: UdpSocket,
    listener: TcpListener,
    next_stream: u64,
    writers: BTreeMap<StreamId, Sender<Out>>,
    events_tx: Sender<StreamEvent>,
    events_rx: Receiver<StreamEvent>,
}

impl RealTransport {
    /// Binds UDP and TCP on `listen`.
    pub fn bind(listen: EndpointAddr, advertise: EndpointAddr) -> io::Result<Self> {
        let sa = listen.to_socket_addr();
        let udp = UdpSocket::bind(sa)?;
        let listener = TcpListener::bind(udp.local_addr()?)?;
        listener.set_nonblocking(true)?;
        let (events_tx, events_rx) = mpsc::channel();
        let mut advertise = advertise;
        if advertise.port == 0 {
            advertise.port = udp.local_addr()?.port();
        }
        Ok(Self {
            advertise,
            udp,
            listener,
            next_stream: 1,
            writers: BTreeMap::new(),
            events_tx,
            events_rx,
        })
    }

    pub fn local_socket(&self) -> io::Result<SocketAddr> {
        self.udp.local_addr()
    }

    /// Waits up to `timeout` for one datagram.
    pub fn recv_datagram(&self, timeout: Duration) -> Option<(EndpointAddr, Vec<u8>)> {
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        self.udp
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))
            .ok()?;
        match self.udp.recv_from(&mut buf) {
            Ok((n, src)) if n <= MAX_DATAGRAM => {
                buf.truncate(n);
                Some((EndpointAddr::from(src), buf))
            }
            Ok(_) => None,
            Err(_) => None,
        }
    }

    /// Non-blocking receive used to drain a burst.
    pub fn try_recv_datagram(&self) -> Option<(EndpointAddr, Vec<u8>)> {
        self.udp.set_nonblocking(true).ok()?;
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        let r = self.udp.recv_from(&mut buf);
        let _ = self.udp.set_nonblocking(false);
        match r {
            Ok((n, src)) if n <= MAX_DATAGRAM => {
                buf.truncate(n);
                Some((EndpointAddr::from(src), buf))
            }
            _ => None,
        }
    }

    /// Accepts pending connections and returns stream events that are
    /// ready, in arrival order.
    pub fn poll_streams(&mut self) -> Vec<StreamEvent> {
        loop {
            match self.listener.accept() {
                Ok((sock, remote)) => self.adopt_incoming(sock, remote),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    break;
                }
            }
        }
        let mut out = Vec::new();
        while let Ok(ev) = self.events_rx.try_recv() {
            if let StreamEvent::Closed { id, .. } = &ev {
                // Closed by us already: the peer never hears of it twice.
                if self.writers.remove(id).is_none() {
                    continue;
                }
            } else if !self.writers.contains_key(&ev.id()) {
                continue;
            }
            out.push(ev);
        }
        out
    }

    fn fresh_id(&mut self) -> StreamId {
        let id = StreamId(self.next_stream);
        self.next_stream += 1;
        id
    }

    fn adopt_incoming(&mut self, sock: TcpStream, remote: SocketAddr) {
        let id = self.fresh_id();
        let (tx, rx) = mpsc::channel();
        self.writers.insert(id, tx);
        let events = self.events_tx.clone();
        thread::spawn(move || {
            let _ = sock.set_nonblocking(false);
            let mut reader = BufReader::new(match sock.try_clone() {
                Ok(s) => s,
                Err(_) => return closed(&events, id, true),
            });
            let mut port = [0u8; 2];
            if reader.read_exact(&mut port).is_err() {
                return closed(&events, id, true);
            }
            let peer = EndpointAddr::from(SocketAddr::new(remote.ip(), u16::from_be_bytes(port)));
            if events.send(StreamEvent::Opened { id, peer }).is_err() {
                return;
            }
            spawn_writer(sock, rx);
            read_frames(reader, id, &events);
        });
    }
}

fn closed(events: &Sender<StreamEvent>, id: StreamId, reset: bool) {
    let _ = events.send(StreamEvent::Closed { id, reset });
}

fn spawn_writer(sock: TcpStream, rx: Receiver<Out>) {
    thread::spawn(move || {
        let mut w = BufWriter::new(&sock);
        while let Ok(out) = rx.recv() {
            let r = match out {
                Out::Frame(f) => w
                    .write_all(&(f.len() as u32).to_be_bytes())
                    .and_then(|_| w.write_all(&f))
                    .and_then(|_| w.flush()),
                Out::Close => {
                    let _ = w.flush();
                    let _ = sock.shutdown(Shutdown::Write);
                    return;
                }
            };
            if r.is_err() {
                let _ = sock.shutdown(Shutdown::Both);
                return;
            }
        }
        // Transport dropped the stream without closing: treat as a reset.
        let _ = sock.shutdown(Shutdown::Both);
    });
}

fn read_frames(mut reader: BufReader<TcpStream>, id: StreamId, events: &Sender<StreamEvent>) {
    loop {
        let mut len = [0u8; 4];
        match reader.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return closed(events, id, false),
            Err(_) => return closed(events, id, true),
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            let _ = reader.get_ref().shutdown(Shutdown::Both);
            return closed(events, id, true);
        }
        let mut frame = vec![0u8; len];
        if reader.read_exact(&mut frame).is_err() {
            return closed(events, id, true);
        }
        if events.send(StreamEvent::Data { id, frame }).is_err() {
            return;
        }
    }
}

pub fn unix_ms() -> SimTime {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as SimTime)
        .unwrap_or(0)
}

impl Transport for RealTransport {
    fn local_addr(&self) -> EndpointAddr {
        self.advertise
    }

    fn now(&self) -> SimTime {
        unix_ms()
    }

    fn send_datagram(&mut self, dst: EndpointAddr, payload: &[u8]) -> Result<(), NetError> {
        if payload.len() > MAX_DATAGRAM {
            return Err(NetError::Oversize(payload.len()));
        }
        // Datagrams are unreliable; a send error is indistinguishable from loss.
        if let Err(e) = self.udp.send_to(payload, dst.to_socket_addr()) {
            tracing::debug!("datagram to {dst} failed: {e}");
        }
        Ok(())
    }

    fn open_stream(&mut self, dst: EndpointAddr) -> Result<StreamId, NetError> {
        let id = self.fresh_id();
        let (tx, rx) = mpsc::channel();
        self.writers.insert(id, tx);
        let events = self.events_tx.clone();
        let my_port = self.advertise.port;
        thread::spawn(move || {
            let sock = match TcpStream::connect_timeout(&dst.to_socket_addr(), CONNECT_TIMEOUT) {
                Ok(s) => s,
                Err(_) => return closed(&events, id, true),
            };
            let _ = sock.set_nodelay(true);
            if (&sock).write_all(&my_port.to_be_bytes()).is_err() {
                return closed(&events, id, true);
            }
            let reader = match sock.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return closed(&events, id, true),
            };
            spawn_writer(sock, rx);
            read_frames(reader, id, &events);
        });
        Ok(id)
    }

    fn stream_send(&mut self, id: StreamId, frame: Vec<u8>) -> Result<(), NetError> {
        if frame.len() > MAX_FRAME {
            return Err(NetError::Oversize(frame.len()));
        }
        let tx = self.writers.get(&id).ok_or(NetError::StreamClosed(id))?;
        tx.send(Out::Frame(frame))
            .map_err(|_| NetError::StreamClosed(id))
    }

    fn close_stream(&mut self, id: StreamId) {
        if let Some(tx) = self.writers.remove(&id) {
            let _ = tx.send(Out::Close);
        }
    }
}
