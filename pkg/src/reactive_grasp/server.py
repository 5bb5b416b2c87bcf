"""Live WebSocket session: streams simulation snapshots, takes user commands.

Runs the simulation loop in real time at the simulated tick rate and speaks
newline-delimited JSON over a plain RFC 6455 WebSocket (no external deps;
the handshake and framing are small enough to carry in-repo).  One line is
one message, and every message carries ``type``, ``tick``, and
``proto_version``.

Message schema, version 1
-------------------------

Server -> client, type ``snapshot`` (one per simulation tick, >= 20 Hz;
the first message after connecting is always a full snapshot):

    tick            simulation tick
    scenario, mode  scenario identity
    paused          whether the loop is holding
    objects         [{position, rotation (row-major 9), half_extents, target}]
    robot           {q, ee_position, ee_rotation, attached,
                     capsules: [{p0, p1, radius, grasp}]}
    tracker         {status, score, position, rotation, t_err, r_err,
                     lost_streak} or null before initialization
    pool            [{index, inside, feasible, distance, age}] best-first
    planner         {phase, s, backsteps, backstep, min_distance,
                     candidate} or null in tracking-only scenarios

Client -> server, type ``command``:

    kind            move_object | rotate_object | nudge_joint |
                    pause | resume | reset
    payload         {object, delta} | {object, dyaw} | {joint, delta}
    client_tick     client-side counter; commands replayed with a
                    client_tick at or below the last accepted one are
                    dropped, so reconnect replays cannot double-apply

Deltas are clamped to 0.5 m translation and pi/2 rotation.  A malformed or
rejected command yields a type ``error`` message ({detail, client_tick})
on the offending connection and the session continues.

Concurrency: the simulator thread is the only writer of the scene; reader
threads (one per connection) only parse and enqueue commands, which the
simulator drains once per tick.  Each connection has a bounded send queue
that drops the oldest snapshot when a slow client falls behind, so the
loop never blocks on the network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time
from collections import deque

import numpy as np

from .harness import SimLoop, TICK_RATE
from .scenario import Scenario

__all__ = ["PROTO_VERSION", "LiveServer", "serve"]

PROTO_VERSION = 1
SEND_QUEUE = 64          # per-client lines; oldest dropped beyond this
_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


# -- websocket plumbing ------------------------------------------------------


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return buf


def _encode_frame(payload: bytes, opcode: int = 0x1) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def _read_frame(sock: socket.socket) -> tuple[int, bytes]:
    b1, b2 = _read_exact(sock, 2)
    opcode = b1 & 0x0F
    n = b2 & 0x7F
    if n == 126:
        n = struct.unpack(">H", _read_exact(sock, 2))[0]
    elif n == 127:
        n = struct.unpack(">Q", _read_exact(sock, 8))[0]
    mask = _read_exact(sock, 4) if b2 & 0x80 else b""
    payload = _read_exact(sock, n)
    if mask:
        payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
    if not b1 & 0x80:
        # collapse a fragmented message before returning it
        more_op, more = _read_frame(sock)
        if more_op in (0x0, opcode):
            payload += more
    return opcode, payload


def _handshake(sock: socket.socket) -> None:
    request = b""
    while b"\r\n\r\n" not in request:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("peer closed during handshake")
        request += chunk
        if len(request) > 1 << 16:
            raise ConnectionError("oversized handshake")
    key = None
    for line in request.split(b"\r\n")[1:]:
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"sec-websocket-key":
            key = value.strip().decode()
    if key is None:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise ConnectionError("not a websocket upgrade")
    accept = base64.b64encode(
        hashlib.sha1((key + _WS_GUID).encode()).digest()).decode()
    sock.sendall(("HTTP/1.1 101 Switching Protocols\r\n"
                  "Upgrade: websocket\r\n"
                  "Connection: Upgrade\r\n"
                  f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode())


class _Client:
    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.queue: deque[str] = deque(maxlen=SEND_QUEUE)
        self.cond = threading.Condition()
        self.write_lock = threading.Lock()
        self.alive = True
        self.last_client_tick = -1   # touched by the simulator thread only

    def push(self, line: str) -> None:
        with self.cond:
            self.queue.append(line)   # deque maxlen drops the oldest
            self.cond.notify()

    def close(self) -> None:
        with self.cond:
            self.alive = False
            self.cond.notify()
        try:
            self.sock.close()
        except OSError:
            pass


# -- snapshot serialization --------------------------------------------------


def _vec(a) -> list:
    return [round(float(v), 5) for v in np.asarray(a).ravel()]


def _snapshot_dict(loop: SimLoop, paused: bool) -> dict:
    scene = loop.scene
    fk = scene.robot.fk(scene.q)
    objects = [{"position": _vec(c.pose.translation),
                "rotation": _vec(c.pose.rotation),
                "half_extents": _vec(c.half_extents),
                "target": i == loop.scenario.target}
               for i, c in enumerate(scene.objects)]
    ends0, ends1 = scene.robot.capsule_endpoints(fk)
    capsules = [{"p0": _vec(ends0[k]), "p1": _vec(ends1[k]),
                 "radius": round(cap.radius, 4), "grasp": cap.grasp_volume}
                for k, cap in enumerate(scene.robot.capsules)]
    tracker = None
    if loop.tracker is not None and loop.tracker.history:
        row = loop.tracker.history[-1]
        tracker = {"status": row.status,
                   "score": round(float(row.score), 4),
                   "position": _vec(loop.tracker.current_pose.translation),
                   "rotation": _vec(loop.tracker.current_pose.rotation),
                   "t_err": round(float(row.t_err), 6),
                   "r_err": round(float(row.r_err), 6),
                   "lost_streak": loop.tracker.lost_streak}
    pool = []
    if loop.ranked is not None:
        pool = [{"index": e.candidate.index, "inside": e.inside,
                 "feasible": e.feasible, "distance": round(e.distance, 4),
                 "age": e.candidate.age}
                for e in loop.ranked.entries]
    planner = None
    if loop.planner is not None:
        p = loop.planner
        planner = {"phase": p.phase, "s": round(p.s, 4),
                   "backsteps": p.backstep_count,
                   "backstep": bool(p.last_backstep),
                   "min_distance": round(float(min(p.min_distance, 9.0)), 4),
                   "candidate": p.q_star_index}
    return {"type": "snapshot", "tick": loop.tick,
            "proto_version": PROTO_VERSION,
            "scenario": loop.scenario.name, "mode": loop.scenario.mode,
            "paused": paused,
            "objects": objects,
            "robot": {"q": _vec(scene.q),
                      "ee_position": _vec(fk.ee_pose.translation),
                      "ee_rotation": _vec(fk.ee_pose.rotation),
                      "attached": scene.attached is not None,
                      "capsules": capsules},
            "tracker": tracker, "pool": pool, "planner": planner}


# -- server proper -----------------------------------------------------------


class LiveServer:
    """Owns the listening socket and the real-time simulation thread.

    ``run()`` drives the loop in the calling thread until ``stop()`` is
    called (or the process is interrupted); ``start()`` spawns it in the
    background, for embedding in tests.  The bound port is available as
    ``.port`` right after construction, so ``port=0`` picks a free one.
    """

    def __init__(self, scenario: Scenario, port: int = 0, seed: int | None = None,
                 host: str = "127.0.0.1"):
        self.scenario = scenario
        self.seed = seed
        self.paused = False
        self.loop: SimLoop | None = None
        self.tick_view = 0
        self.clients: list[_Client] = []
        self.clients_lock = threading.Lock()
        self.commands: deque = deque()
        self.latest_line: str | None = None
        self.stop_event = threading.Event()
        self._threads: list[threading.Thread] = []
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(0.25)
        self.port = self.listener.getsockname()[1]

    # -- network side, one thread per connection --------------------------

    def _accept_loop(self) -> None:
        while not self.stop_event.is_set():
            try:
                sock, addr = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._client_main, args=(sock, addr),
                                 daemon=True)
            t.start()

    def _client_main(self, sock: socket.socket, addr) -> None:
        try:
            _handshake(sock)
        except (ConnectionError, OSError):
            sock.close()
            return
        client = _Client(sock, addr)
        with self.clients_lock:
            self.clients.append(client)
        if self.latest_line is not None:
            client.push(self.latest_line)    # connect -> full snapshot first
        sender = threading.Thread(target=self._send_loop, args=(client,),
                                  daemon=True)
        sender.start()
        try:
            self._read_loop(client)
        finally:
            self._drop(client)

    def _send_loop(self, client: _Client) -> None:
        try:
            while client.alive:
                with client.cond:
                    while not client.queue and client.alive:
                        client.cond.wait(0.5)
                    if not client.alive:
                        return
                    line = client.queue.popleft()
                frame = _encode_frame((line + "\n").encode())
                with client.write_lock:
                    client.sock.sendall(frame)
        except OSError:
            self._drop(client)

    def _read_loop(self, client: _Client) -> None:
        while client.alive and not self.stop_event.is_set():
            try:
                opcode, payload = _read_frame(client.sock)
            except (ConnectionError, OSError):
                return
            if opcode == 0x8:      # close
                return
            if opcode == 0x9:      # ping
                try:
                    with client.write_lock:
                        client.sock.sendall(_encode_frame(payload, opcode=0xA))
                except OSError:
                    return
                continue
            if opcode != 0x1:
                continue
            for raw in payload.decode("utf-8", "replace").splitlines():
                if raw.strip():
                    self._take_message(client, raw)

    def _take_message(self, client: _Client, raw: str) -> None:
        try:
            msg = json.loads(raw)
            if not isinstance(msg, dict):
                raise ValueError("message must be an object")
            if msg.get("type") != "command":
                raise ValueError(f"unsupported type {msg.get('type')!r}")
            if not isinstance(msg.get("kind"), str):
                raise ValueError("command needs a string kind")
        except ValueError as exc:
            client.push(self._error_line(str(exc)))
            return
        self.commands.append((client, msg))

    def _error_line(self, detail: str, client_tick=None) -> str:
        msg = {"type": "error", "tick": self.tick_view,
               "proto_version": PROTO_VERSION, "detail": detail}
        if client_tick is not None:
            msg["client_tick"] = client_tick
        return json.dumps(msg, separators=(",", ":"))

    def _drop(self, client: _Client) -> None:
        client.close()
        with self.clients_lock:
            if client in self.clients:
                self.clients.remove(client)

    def _broadcast(self, line: str) -> None:
        self.latest_line = line
        with self.clients_lock:
            targets = list(self.clients)
        for client in targets:
            client.push(line)

    # -- simulator side, single thread -------------------------------------

    def _drain_commands(self) -> None:
        while True:
            try:
                client, msg = self.commands.popleft()
            except IndexError:
                return
            ctick = msg.get("client_tick", msg.get("tick"))
            if isinstance(ctick, int):
                if ctick <= client.last_client_tick:
                    continue               # reconnect replay, already applied
                client.last_client_tick = ctick
            kind = msg["kind"]
            if kind == "pause":
                self.paused = True
            elif kind == "resume":
                self.paused = False
            elif kind == "reset":
                loop = SimLoop(self.scenario, self.seed)
                loop.detect_and_init_tracker()
                self.loop = loop
                self.paused = False
            else:
                payload = msg.get("payload")
                err = self.loop.apply_command(
                    kind, payload if isinstance(payload, dict) else {})
                if err is not None:
                    client.push(self._error_line(err, ctick))

    def run(self) -> None:
        """Real-time loop; blocks until stop() or KeyboardInterrupt."""
        loop = SimLoop(self.scenario, self.seed)
        loop.detect_and_init_tracker()
        self.loop = loop
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)
        period = 1.0 / TICK_RATE
        next_t = time.monotonic()
        try:
            while not self.stop_event.is_set():
                self._drain_commands()
                if not self.paused:
                    self.loop.step()
                self.tick_view = self.loop.tick
                line = json.dumps(_snapshot_dict(self.loop, self.paused),
                                  separators=(",", ":"))
                self._broadcast(line)
                next_t += period
                delay = next_t - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_t = time.monotonic()   # behind; skip, don't spiral
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def start(self) -> None:
        t = threading.Thread(target=self.run, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self.stop_event.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self.clients_lock:
            targets = list(self.clients)
        for client in targets:
            client.close()


def serve(scenario: Scenario, port: int, seed: int | None = None,
          host: str = "127.0.0.1") -> None:
    """Serve a live session on ``port``; returns when interrupted."""
    server = LiveServer(scenario, port=port, seed=seed, host=host)
    print(f"serving {scenario.name!r} on ws://{host}:{server.port} "
          f"(proto {PROTO_VERSION})")
    server.run()
