//! Minimal HTTP/1.1 transport for the service endpoints.
//!
//! Supports exactly what the wire protocol needs: `POST`/`GET` with JSON
//! bodies, `Content-Length` framing, `Connection: close` semantics, and
//! per-attempt timeouts on the client side. One thread per connection on
//! the server; connections are short-lived.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};

const MAX_HEADER_BYTES: usize = 16 * 1024;
const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;
const SERVER_IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    /// JSON body.
    pub body: String,
}

impl HttpResponse {
    pub fn json(status: u16, body: String) -> Self {
        HttpResponse { status, body }
    }
}

pub type Handler = Arc<dyn Fn(&HttpRequest) -> HttpResponse + Send + Sync>;

/// A running server; shuts down when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `addr` (use port 0 for an ephemeral port) and serve requests with
/// `handler` until the handle is dropped.
pub fn spawn_server(addr: &str, handler: Handler) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&shutdown);
    let join = std::thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let handler = Arc::clone(&handler);
                    std::thread::spawn(move || {
                        let _ = handle_connection(stream, handler);
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle {
        addr: local,
        shutdown,
        join: Some(join),
    })
}

fn handle_connection(stream: TcpStream, handler: Handler) -> Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(SERVER_IO_TIMEOUT))?;
    stream.set_write_timeout(Some(SERVER_IO_TIMEOUT))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let response = match read_request(&mut reader) {
        Ok(request) => handler(&request),
        Err(e) => HttpResponse::json(
            400,
            format!(
                "{{\"code\":\"bad_request\",\"message\":{}}}",
                json_string(&e.to_string())
            ),
        ),
    };
    write_response(stream, &response)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| "\"bad request\"".into())
}

fn read_request<R: BufRead>(reader: &mut R) -> Result<HttpRequest> {
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts
        .next()
        .ok_or_else(|| Error::Service("empty request line".into()))?
        .to_string();
    let path = parts
        .next()
        .ok_or_else(|| Error::Service("request line has no path".into()))?
        .to_string();

    let mut content_length = 0usize;
    let mut header_bytes = request_line.len();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Service(
                "connection closed before headers ended".into(),
            ));
        }
        header_bytes += n;
        if header_bytes > MAX_HEADER_BYTES {
            return Err(Error::Service("headers too large".into()));
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Service(format!("bad content-length `{value}`")))?;
            }
        }
    }
    if content_length > MAX_BODY_BYTES {
        return Err(Error::Service("body too large".into()));
    }

    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8(body).map_err(|_| Error::Service("body is not UTF-8".into()))?;
    Ok(HttpRequest { method, path, body })
}

fn write_response(mut stream: TcpStream, response: &HttpResponse) -> Result<()> {
    let reason = match response.status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Internal Server Error",
    };
    let head = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        response.status,
        reason,
        response.body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(response.body.as_bytes())?;
    stream.flush()?;
    Ok(())
}

/// Strip an optional `http://` scheme and trailing slash from an endpoint.
fn host_port(endpoint: &str) -> &str {
    endpoint
        .strip_prefix("http://")
        .unwrap_or(endpoint)
        .trim_end_matches('/')
}

fn connect(endpoint: &str, timeout: Duration) -> Result<TcpStream> {
    let target = host_port(endpoint);
    let addrs: Vec<SocketAddr> = target
        .to_socket_addrs()
        .map_err(|e| Error::Service(format!("cannot resolve `{target}`: {e}")))?
        .collect();
    let addr = addrs
        .first()
        .ok_or_else(|| Error::Service(format!("`{target}` resolved to no addresses")))?;
    let stream = TcpStream::connect_timeout(addr, timeout)
        .map_err(|e| Error::Service(format!("connect to `{target}` failed: {e}")))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    Ok(stream)
}

/// One HTTP request against `endpoint`; `timeout` bounds each of connect,
/// write, and read.
pub fn request(
    endpoint: &str,
    method: &str,
    path: &str,
    body: Option<&str>,
    timeout: Duration,
) -> Result<(u16, String)> {
    let mut stream = connect(endpoint, timeout)?;
    let body = body.unwrap_or("");
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        host_port(endpoint),
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body.as_bytes())?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Service(format!("bad status line `{}`", status_line.trim())))?;

    let mut content_length: Option<usize> = None;
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Service(
                "connection closed before headers ended".into(),
            ));
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().ok();
            }
        }
    }

    let body = match content_length {
        Some(n) => {
            if n > MAX_BODY_BYTES {
                return Err(Error::Service("response body too large".into()));
            }
            let mut buf = vec![0u8; n];
            reader.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|_| Error::Service("response is not UTF-8".into()))?
        }
        None => {
            let mut buf = String::new();
            reader.read_to_string(&mut buf)?;
            buf
        }
    };
    Ok((status, body))
}

/// POST with one retry per `retries`; network errors on the last attempt
/// propagate.
pub fn post_json_with_retry(
    endpoint: &str,
    path: &str,
    body: &str,
    timeout: Duration,
    retries: u32,
) -> Result<(u16, String)> {
    let mut last_err = None;
    for _ in 0..=retries {
        match request(endpoint, "POST", path, Some(body), timeout) {
            Ok(done) => return Ok(done),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt was made"))
}
