//! Request/response transports: framed TCP, an in-process loopback that
//! still goes through the codec, and a switch used to take a service down.

use std::net::SocketAddr;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde_json::Value;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::wire::{decode, encode, error_body, read_frame, write_frame, ServiceError};

/// A service: one JSON request in, one JSON response out.
#[async_trait]
pub trait Handler: Send + Sync + 'static {
    async fn handle(&self, request: Value) -> Value;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn call(&self, request: Value) -> Result<Value, TransportError>;
}

/// Calls a handler in-process. Requests and responses are encoded and
/// decoded exactly as on the wire.
pub struct LocalTransport {
    handler: Arc<dyn Handler>,
}

impl LocalTransport {
    pub fn new(handler: Arc<dyn Handler>) -> Self {
        Self { handler }
    }
}

#[async_trait]
impl Transport for LocalTransport {
    async fn call(&self, request: Value) -> Result<Value, TransportError> {
        let req = decode(&encode(&request)).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let resp = self.handler.handle(req).await;
        decode(&encode(&resp)).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

/// Framed JSON over TCP with a small pool of idle connections.
pub struct TcpTransport {
    addr: SocketAddr,
    idle: Mutex<Vec<TcpStream>>,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

#[async_trait]
impl Transport for TcpTransport {
    async fn call(&self, request: Value) -> Result<Value, TransportError> {
        let pooled = self.idle.lock().pop();
        let mut stream = match pooled {
            Some(s) => s,
            None => {
                let s = TcpStream::connect(self.addr)
                    .await
                    .map_err(|e| TransportError::Unavailable(format!("{}: {e}", self.addr)))?;
                s.set_nodelay(true).ok();
                s
            }
        };
        let io_err = |e: std::io::Error| TransportError::Unavailable(e.to_string());
        write_frame(&mut stream, &encode(&request)).await.map_err(io_err)?;
        let frame = read_frame(&mut stream)
            .await
            .map_err(io_err)?
            .ok_or_else(|| TransportError::Unavailable("connection closed".into()))?;
        let resp = decode(&frame).map_err(|e| TransportError::Protocol(e.to_string()))?;
        self.idle.lock().push(stream);
        Ok(resp)
    }
}

/// Forwards to an inner transport that can be swapped out or removed.
/// With no target every call fails as unavailable.
#[derive(Default)]
pub struct SwitchTransport {
    target: RwLock<Option<Arc<dyn Transport>>>,
}

impl SwitchTransport {
    pub fn new(target: Arc<dyn Transport>) -> Self {
        Self {
            target: RwLock::new(Some(target)),
        }
    }

    pub fn set(&self, target: Option<Arc<dyn Transport>>) {
        *self.target.write() = target;
    }
}

#[async_trait]
impl Transport for SwitchTransport {
    async fn call(&self, request: Value) -> Result<Value, TransportError> {
        let target = self.target.read().clone();
        match target {
            Some(t) => t.call(request).await,
            None => Err(TransportError::Unavailable("service is down".into())),
        }
    }
}

/// A running TCP server; dropping the handle does not stop it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    /// Stops accepting connections and closes open ones.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }

    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Serves `handler` on `listener`: one task per connection, requests on a
/// connection answered in order.
pub fn serve(listener: TcpListener, handler: Arc<dyn Handler>) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let (tx, rx) = watch::channel(false);
    let task = tokio::spawn(async move {
        let mut stop = rx.clone();
        let mut conns = Vec::new();
        loop {
            tokio::select! {
                _ = stop.changed() => break,
                accepted = listener.accept() => {
                    let Ok((stream, _)) = accepted else { continue };
                    stream.set_nodelay(true).ok();
                    conns.push(tokio::spawn(connection(stream, handler.clone(), rx.clone())));
                    conns.retain(|c: &JoinHandle<()>| !c.is_finished());
                }
            }
        }
        for c in conns {
            c.abort();
        }
    });
    Ok(ServerHandle {
        addr,
        shutdown: tx,
        task,
    })
}

async fn connection(mut stream: TcpStream, handler: Arc<dyn Handler>, mut stop: watch::Receiver<bool>) {
    loop {
        let frame = tokio::select! {
            _ = stop.changed() => return,
            f = read_frame(&mut stream) => f,
        };
        let resp = match frame {
            Ok(Some(bytes)) => match decode(&bytes) {
                Ok(req) => handler.handle(req).await,
                Err(e) => error_body(None, &ServiceError::bad_request(format!("invalid json: {e}"))),
            },
            Ok(None) | Err(_) => return,
        };
        if write_frame(&mut stream, &encode(&resp)).await.is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Echo;

    #[async_trait]
    impl Handler for Echo {
        async fn handle(&self, request: Value) -> Value {
            json!({ "echo": request })
        }
    }

    #[tokio::test]
    async fn tcp_roundtrip_reuses_connections() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let server = serve(listener, Arc::new(Echo)).unwrap();
        let t = TcpTransport::new(server.addr);
        for i in 0..3 {
            let r = t.call(json!({ "n": i })).await.unwrap();
            assert_eq!(r["echo"]["n"], i);
        }
        assert_eq!(t.idle.lock().len(), 1);
        server.shutdown().await;
    }

    #[tokio::test]
    async fn tcp_reports_unreachable_and_invalid_json() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = TcpTransport::new(addr).call(json!({})).await.unwrap_err();
        assert!(matches!(err, TransportError::Unavailable(_)));

        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let server = serve(listener, Arc::new(Echo)).unwrap();
        let mut s = TcpStream::connect(server.addr).await.unwrap();
        write_frame(&mut s, b"{not json").await.unwrap();
        let resp = decode(&read_frame(&mut s).await.unwrap().unwrap()).unwrap();
        assert_eq!(resp["error"]["code"], "bad_request");
        server.shutdown().await;
    }

    #[tokio::test]
    async fn switch_goes_down_and_up() {
        let sw = SwitchTransport::new(Arc::new(LocalTransport::new(Arc::new(Echo))));
        assert!(sw.call(json!(1)).await.is_ok());
        sw.set(None);
        assert!(matches!(sw.call(json!(1)).await, Err(TransportError::Unavailable(_))));
    }
}
