//! Topic-prefix publish/subscribe with best-effort fan-out.
//!
//! Each subscriber owns a bounded queue. A full queue loses the message for
//! that subscriber only; publishers never wait. Messages are two frames, a
//! UTF-8 topic and a payload. The TCP transport writes each frame as a
//! big-endian `u32` length followed by the bytes, after the subscriber has
//! sent its topic prefix terminated by `\n`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::sync::mpsc;

pub const TOPIC_JOB_START: &str = "meta.job_start";
pub const TOPIC_JOB_END: &str = "meta.job_end";

pub fn metrics_topic(db: &str) -> String {
    format!("metrics.{db}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub payload: Arc<str>,
}

impl BusMessage {
    pub fn new(topic: impl Into<String>, payload: impl Into<Arc<str>>) -> Self {
        BusMessage {
            topic: topic.into(),
            payload: payload.into(),
        }
    }
}

struct Subscriber {
    prefix: String,
    tx: mpsc::Sender<BusMessage>,
}

#[derive(Default)]
pub struct Bus {
    subscribers: RwLock<Vec<Subscriber>>,
    published: AtomicU64,
    dropped: AtomicU64,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a subscriber for every topic starting with `prefix`.
    pub fn subscribe(&self, prefix: impl Into<String>, capacity: usize) -> Subscription {
        let (tx, rx) = mpsc::channel(capacity.max(1));
        self.subscribers
            .write()
            .expect("bus poisoned")
            .push(Subscriber {
                prefix: prefix.into(),
                tx,
            });
        Subscription { rx }
    }

    pub fn publish(&self, message: BusMessage) {
        self.published.fetch_add(1, Ordering::Relaxed);
        let mut closed = false;
        {
            let subs = self.subscribers.read().expect("bus poisoned");
            for sub in subs.iter().filter(|s| message.topic.starts_with(&s.prefix)) {
                match sub.tx.try_send(message.clone()) {
                    Ok(()) => {}
                    Err(mpsc::error::TrySendError::Full(_)) => {
                        self.dropped.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(mpsc::error::TrySendError::Closed(_)) => closed = true,
                }
            }
        }
        if closed {
            self.subscribers
                .write()
                .expect("bus poisoned")
                .retain(|s| !s.tx.is_closed());
        }
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers
            .read()
            .expect("bus poisoned")
            .iter()
            .filter(|s| !s.tx.is_closed())
            .count()
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    /// Messages lost to full subscriber queues.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

pub struct Subscription {
    rx: mpsc::Receiver<BusMessage>,
}

impl Subscription {
    pub async fn recv(&mut self) -> Option<BusMessage> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<BusMessage> {
        self.rx.try_recv().ok()
    }

    /// Everything queued right now.
    pub fn drain(&mut self) -> Vec<BusMessage> {
        std::iter::from_fn(|| self.try_recv()).collect()
    }
}

/// Serves the bus over TCP until the listener fails.
pub async fn serve_tcp(
    bus: Arc<Bus>,
    listener: tokio::net::TcpListener,
    capacity: usize,
) -> io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let bus = Arc::clone(&bus);
        tokio::spawn(async move {
            if let Err(e) = serve_subscriber(bus, stream, capacity).await {
                tracing::debug!(%peer, error = %e, "bus subscriber disconnected");
            }
        });
    }
}

async fn serve_subscriber(
    bus: Arc<Bus>,
    stream: tokio::net::TcpStream,
    capacity: usize,
) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut prefix = String::new();
    BufReader::new(read).read_line(&mut prefix).await?;
    let prefix = prefix.trim_end_matches(['\r', '\n']).to_owned();
    let mut sub = bus.subscribe(prefix, capacity);
    // Acknowledge once registered so clients know nothing published later is missed.
    write.write_all(b"OK\n").await?;
    while let Some(msg) = sub.recv().await {
        let mut frame = Vec::with_capacity(8 + msg.topic.len() + msg.payload.len());
        encode_frame(&mut frame, msg.topic.as_bytes());
        encode_frame(&mut frame, msg.payload.as_bytes());
        write.write_all(&frame).await?;
    }
    Ok(())
}

fn encode_frame(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Blocking TCP subscriber.
pub struct BusClient {
    stream: TcpStream,
}

impl BusClient {
    pub fn connect(addr: impl ToSocketAddrs, prefix: &str) -> io::Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.write_all(prefix.as_bytes())?;
        stream.write_all(b"\n")?;
        let mut ack = [0u8; 3];
        stream.read_exact(&mut ack)?;
        if &ack != b"OK\n" {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "bad bus handshake",
            ));
        }
        Ok(BusClient { stream })
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.stream.peer_addr()
    }

    pub fn recv(&mut self) -> io::Result<BusMessage> {
        let topic = self.read_frame()?;
        let payload = self.read_frame()?;
        let utf8 = |b: Vec<u8>| {
            String::from_utf8(b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        };
        Ok(BusMessage::new(utf8(topic)?, utf8(payload)?))
    }

    fn read_frame(&mut self) -> io::Result<Vec<u8>> {
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len)?;
        let mut buf = vec![0u8; u32::from_be_bytes(len) as usize];
        self.stream.read_exact(&mut buf)?;
        Ok(buf)
    }
}
