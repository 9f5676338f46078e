"""Show the wire format: length-prefixed frames carrying canonical JSON.

Run with: python3 demos/01_protocol_frames.py
"""

import sys

from scaleout.wireproto import (
    MalformedBody,
    RpcRequest,
    decode_frame,
    encode_frame,
    make_result,
)


def hexdump(data: bytes) -> str:
    return " ".join(f"{b:02x}" for b in data)


def main() -> int:
    request = RpcRequest(id=7, method="Scale", params={"nodes": 6, "mode": "absolute"})
    frame = encode_frame(request)
    print(f"request : {request}")
    print(f"frame   : {len(frame)} bytes")
    print(f"  prefix: {hexdump(frame[:4])}  (big-endian body length = {len(frame) - 4})")
    print(f"  body  : {frame[4:].decode()}")

    decoded, consumed = decode_frame(frame)
    assert decoded == request and consumed == len(frame)
    print(f"decoded : {decoded}")

    response = make_result(request.id, {"accepted": True})
    print(f"\nresponse frame body: {encode_frame(response)[4:].decode()}")

    # a flipped byte in the body must surface as a typed error, never a crash
    corrupted = frame[:10] + bytes([frame[10] ^ 0xFF]) + frame[11:]
    try:
        decode_frame(corrupted)
    except MalformedBody as exc:
        print(f"\ncorrupted frame rejected: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
