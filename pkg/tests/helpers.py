from hstf.ingest import Endpoint, HttpMessage, TupleFragment, parse_message


def req(raw: bytes, ts: int = 0) -> HttpMessage:
    return parse_message(raw, ts)


def frag(src, sport, dst, dport) -> TupleFragment:
    return TupleFragment(Endpoint(src, sport), Endpoint(dst, dport))


def get(path="/a", host="x", ts=0, extra=b""):
    return parse_message(b"GET " + path.encode() + b" HTTP/1.1\r\nHost: " + host.encode() + b"\r\n" + extra + b"\r\n", ts)


def ok(ts=0, body=b""):
    return parse_message(b"HTTP/1.1 200 OK\r\nContent-Length: %d\r\n\r\n" % len(body) + body, ts)
