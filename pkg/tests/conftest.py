"""Shared fixtures: a scriptable local chat-completions mock server."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class MockLLMServer:
    """Local OpenAI-compatible endpoint with a scripted response sequence.

    Each script entry is a dict taking any of:
      content: str      -> 200 with choices[0].message.content set to it
      status: int       -> that HTTP status with an empty JSON body
      body: dict        -> 200 with this raw JSON body
      delay: float      -> sleep before answering (for timeout tests)
    The last entry repeats once the script is exhausted.
    """

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with outer._lock:
                    outer.requests.append(payload)
                    idx = min(len(outer.requests) - 1, len(outer.script) - 1)
                    entry = outer.script[idx]
                if "delay" in entry:
                    time.sleep(entry["delay"])
                status = entry.get("status", 200)
                if "body" in entry:
                    body = entry["body"]
                elif "content" in entry:
                    body = {"choices": [{"message": {
                        "role": "assistant", "content": entry["content"]}}]}
                else:
                    body = {}
                data = json.dumps(body).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up (timeout tests); nothing to do

            def log_message(self, fmt, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    @property
    def url(self):
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def llm_server():
    servers = []

    def factory(script):
        server = MockLLMServer(script)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()
