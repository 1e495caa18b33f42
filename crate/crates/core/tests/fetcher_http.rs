use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use wextractor::fetcher::{FetchConfig, Fetcher, PageSource, PageUrl, Source, Unavailable};

/// Minimal HTTP/1.1 server answering by path; counts requests.
struct Stub {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
}

fn respond(path: &str) -> (u16, &'static str, String) {
    match path {
        "/ok" => (200, "text/html; charset=utf-8", r#"<span id="ctl00" class="price">$ 125</span>"#.into()),
        "/bare" => (200, "text/html", "<html></html>".into()),
        "/blank" => (200, "text/html", "  \n".into()),
        "/latin1" => (200, "text/html; charset=iso-8859-1", String::new()),
        "/moved" => (302, "text/html", String::new()),
        _ => (404, "text/html", "not here".into()),
    }
}

fn serve() -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                    break;
                }
            }
            let (status, ctype, body) = respond(&path);
            let mut bytes = body.into_bytes();
            if path == "/latin1" {
                bytes = b"<p>\xa3 12.00</p>".to_vec();
            }
            let extra = if status == 302 { "Location: /ok\r\n" } else { "" };
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n",
                bytes.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&bytes);
        }
    });
    Stub { addr, hits }
}

fn url(stub: &Stub, path: &str) -> PageUrl {
    PageUrl::parse(&format!("http://{}{path}", stub.addr)).unwrap()
}

fn fetcher() -> Fetcher {
    Fetcher::new(FetchConfig {
        timeout: Duration::from_secs(5),
        ..FetchConfig::default()
    })
}

#[test]
fn ok_page_is_verbatim() {
    let stub = serve();
    let f = fetcher();
    let page = f.fetch_raw_html(&url(&stub, "/ok")).unwrap();
    assert_eq!(page.body, r#"<span id="ctl00" class="price">$ 125</span>"#);
    assert_eq!(page.source, Source::Network);
    assert!(f.is_available(&url(&stub, "/ok")));
}

#[test]
fn one_request_per_fetch() {
    let stub = serve();
    let f = fetcher();
    f.fetch_raw_html(&url(&stub, "/ok")).unwrap();
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn status_404_is_unavailable() {
    let stub = serve();
    let f = fetcher();
    assert_eq!(f.fetch_raw_html(&url(&stub, "/missing")), Err(Unavailable::Status(404)));
    assert!(!f.is_available(&url(&stub, "/missing")));
}

#[test]
fn bare_html_depends_on_strictness() {
    let stub = serve();
    assert!(fetcher().fetch_raw_html(&url(&stub, "/bare")).is_ok());
    let strict = Fetcher::new(FetchConfig {
        strict_empty_body: true,
        ..FetchConfig::default()
    });
    assert_eq!(strict.fetch_raw_html(&url(&stub, "/bare")), Err(Unavailable::EmptyBody));
    assert_eq!(fetcher().fetch_raw_html(&url(&stub, "/blank")), Err(Unavailable::EmptyBody));
}

#[test]
fn redirect_records_final_url() {
    let stub = serve();
    let page = fetcher().fetch_raw_html(&url(&stub, "/moved")).unwrap();
    assert!(page.final_url.ends_with("/ok"), "{}", page.final_url);
    assert!(page.body.contains("ctl00"));
}

#[test]
fn charset_from_header() {
    let stub = serve();
    let page = fetcher().fetch_raw_html(&url(&stub, "/latin1")).unwrap();
    assert_eq!(page.body, "<p>\u{a3} 12.00</p>");
}

#[test]
fn unreachable_host_is_unavailable() {
    // Bind then drop to get a port with no listener.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let u = PageUrl::parse(&format!("http://127.0.0.1:{port}/")).unwrap();
    let f = fetcher();
    assert!(matches!(f.fetch_raw_html(&u), Err(Unavailable::Network(_))));
    assert!(!f.is_available(&u));
}

#[test]
fn timestamps_are_monotone() {
    let stub = serve();
    let f = fetcher();
    let a = f.fetch_raw_html(&url(&stub, "/ok")).unwrap().fetched_at;
    let b = f.fetch_raw_html(&url(&stub, "/ok")).unwrap().fetched_at;
    assert!(b >= a);
}
