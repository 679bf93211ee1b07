import socket
import struct
import zlib

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import WireError
from core.wire import (
    HEADER, LENGTH_PREFIX, MAGIC, DType, ErrorCode, Frame, MsgType, decode_frame, encode_frame,
    error_frame, ping, recv_frame_bytes, send_frame,
)


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack('<I', zlib.crc32(body))


class FrameCodecTestCase(SimpleTestCase):
    """Codificação ISWF: cabeçalho, dimensões, payload e CRC32."""

    def test_ping_is_21_bytes(self):
        raw = encode_frame(ping(7))
        self.assertEqual(len(raw), 21)
        self.assertEqual(raw[:4], MAGIC)
        self.assertEqual(decode_frame(raw), ping(7))

    def test_small_tensor_layout(self):
        tensor = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        raw = encode_frame(Frame(MsgType.INFER_REQUEST, 1, tensor))
        self.assertEqual(len(raw), 17 + 8 + 16 + 4)
        magic, version, msg_type, request_id, dtype, rank = HEADER.unpack_from(raw)
        self.assertEqual((magic, version, msg_type, request_id, dtype, rank), (MAGIC, 1, 0, 1, 0, 2))
        self.assertEqual(struct.unpack_from('<2I', raw, 17), (2, 2))
        decoded = decode_frame(raw)
        self.assertEqual(decoded.tensor.dtype, np.float32)
        np.testing.assert_array_equal(decoded.tensor, tensor)

    def test_f64_and_special_values_are_bit_exact(self):
        tensor = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324], dtype=np.float64)
        decoded = decode_frame(encode_frame(Frame(MsgType.INFER_RESPONSE, 2**63, tensor)))
        self.assertEqual(decoded.request_id, 2**63)
        self.assertEqual(decoded.tensor.tobytes(), tensor.tobytes())
        self.assertTrue(np.signbit(decoded.tensor[1]))

    def test_signed_zero_distinguishes_frames(self):
        positive = Frame(MsgType.INFER_REQUEST, 1, np.zeros(3, dtype=np.float32))
        negative = Frame(MsgType.INFER_REQUEST, 1, -np.zeros(3, dtype=np.float32))
        self.assertNotEqual(positive, negative)
        self.assertNotEqual(encode_frame(positive), encode_frame(negative))

    def test_error_frame_carries_code(self):
        frame = decode_frame(encode_frame(error_frame(9, ErrorCode.BAD_CRC)))
        self.assertEqual(frame.msg_type, MsgType.ERROR)
        self.assertEqual(frame.error_code, ErrorCode.BAD_CRC)
        self.assertIsNone(ping(1).error_code)

    def test_unsupported_dtype(self):
        with self.assertRaises(WireError) as ctx:
            encode_frame(Frame(MsgType.INFER_REQUEST, 1, np.zeros(2, dtype=np.int32)))
        self.assertEqual(ctx.exception.code, ErrorCode.BAD_DTYPE)


class FrameValidationTestCase(SimpleTestCase):
    """Cada defeito tem o seu código de erro."""

    def setUp(self):
        self.raw = encode_frame(Frame(MsgType.INFER_REQUEST, 3, np.arange(6, dtype=np.float32).reshape(2, 3)))

    def assertWireError(self, raw, code):
        with self.assertRaises(WireError) as ctx:
            decode_frame(raw)
        self.assertEqual(ctx.exception.code, code)

    def test_truncated(self):
        self.assertWireError(self.raw[:10], ErrorCode.TRUNCATED)

    def test_bad_magic(self):
        self.assertWireError(b"XXXX" + self.raw[4:], ErrorCode.BAD_MAGIC)

    def test_bad_version(self):
        self.assertWireError(self.raw[:4] + struct.pack('<H', 2) + self.raw[6:], ErrorCode.BAD_VERSION)

    def test_any_flipped_payload_bit_fails_crc(self):
        for position in range(17, len(self.raw) - 4):
            corrupted = bytearray(self.raw)
            corrupted[position] ^= 0x01
            with self.subTest(position=position):
                self.assertWireError(bytes(corrupted), ErrorCode.BAD_CRC)

    def test_bad_msg_type(self):
        body = HEADER.pack(MAGIC, 1, 9, 1, int(DType.F32), 0)
        self.assertWireError(_with_crc(body), ErrorCode.BAD_MSG_TYPE)

    def test_bad_dtype(self):
        body = HEADER.pack(MAGIC, 1, int(MsgType.PING), 1, 7, 0)
        self.assertWireError(_with_crc(body), ErrorCode.BAD_DTYPE)

    def test_truncated_dims(self):
        body = HEADER.pack(MAGIC, 1, int(MsgType.INFER_REQUEST), 1, int(DType.F32), 3) + struct.pack('<I', 2)
        self.assertWireError(_with_crc(body), ErrorCode.TRUNCATED)

    def test_length_mismatch(self):
        body = self.raw[:-4] + b'\x00\x00\x00\x00'
        self.assertWireError(_with_crc(body), ErrorCode.LENGTH_MISMATCH)

    def test_error_codes_are_distinct(self):
        self.assertEqual(len(set(ErrorCode)), len(list(ErrorCode)))


class StreamTransportTestCase(SimpleTestCase):

    def setUp(self):
        self.left, self.right = socket.socketpair()

    def tearDown(self):
        self.left.close()
        self.right.close()

    def test_length_prefixed_round_trip(self):
        frame = Frame(MsgType.INFER_REQUEST, 4, np.ones((2, 2), dtype=np.float32))
        send_frame(self.left, frame)
        send_frame(self.left, ping(5))
        self.assertEqual(decode_frame(recv_frame_bytes(self.right, 1024)), frame)
        self.assertEqual(decode_frame(recv_frame_bytes(self.right, 1024)), ping(5))

    def test_clean_close_returns_none(self):
        self.left.close()
        self.assertIsNone(recv_frame_bytes(self.right, 1024))

    def test_oversized_frame(self):
        self.left.sendall(LENGTH_PREFIX.pack(10_000))
        with self.assertRaises(WireError) as ctx:
            recv_frame_bytes(self.right, 1024)
        self.assertEqual(ctx.exception.code, ErrorCode.FRAME_TOO_LARGE)

    def test_body_cut_short(self):
        self.left.sendall(LENGTH_PREFIX.pack(100) + bytes(14))
        self.left.close()
        with self.assertRaises(WireError) as ctx:
            recv_frame_bytes(self.right, 1024)
        self.assertEqual(ctx.exception.code, ErrorCode.TRUNCATED)

    def test_body_timeout(self):
        self.right.settimeout(0.2)
        self.left.sendall(LENGTH_PREFIX.pack(100) + bytes(14))
        with self.assertRaises(WireError) as ctx:
            recv_frame_bytes(self.right, 1024)
        self.assertEqual(ctx.exception.code, ErrorCode.TRUNCATED)

    def test_thousand_frames_on_one_stream(self):
        rng = np.random.default_rng(0)
        for request_id in range(1000):
            dtype = np.float32 if request_id % 2 else np.float64
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            frame = Frame(MsgType.INFER_REQUEST, request_id, rng.standard_normal(shape).astype(dtype))
            send_frame(self.left, frame)
            self.assertEqual(decode_frame(recv_frame_bytes(self.right, 1 << 16)), frame)
