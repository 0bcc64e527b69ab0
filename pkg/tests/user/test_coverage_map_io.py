"""
Comprehensive unit tests with coverage for map_io.py
"""

import unittest
import sys
import os
import json
import tempfile
import shutil

import numpy as np
from PIL import Image

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from disparity_core import ConfidenceMap, DepthMap, DisparityMap
from exceptions import FileOperationError, ValidationError
from map_io import (MapCodecFactory, PfmCodec, Png16Codec, read_image, read_map, read_mask_png, read_pfm,
                    write_json, write_map, write_pfm, write_png8)


class MapIoTestCase(unittest.TestCase):
    """Base class with a scratch directory."""

    def setUp(self):
        """Create a temporary directory."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.temp_dir)

    def path(self, name):
        return os.path.join(self.temp_dir, name)


class TestPfm(MapIoTestCase):
    """Test PFM reading and writing."""

    def test_header_and_row_order(self):
        """Test that rows are stored bottom to top with a little-endian scale."""
        array = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        write_pfm(self.path('a.pfm'), array)
        with open(self.path('a.pfm'), 'rb') as f:
            self.assertEqual(f.readline(), b'Pf\n')
            self.assertEqual(f.readline(), b'3 2\n')
            self.assertEqual(f.readline(), b'-1.0\n')
            payload = np.frombuffer(f.read(), dtype='<f4')
        self.assertEqual(payload.tolist(), [4.0, 5.0, 6.0, 1.0, 2.0, 3.0])
        np.testing.assert_array_equal(read_pfm(self.path('a.pfm')), array)

    def test_float64_stored_as_float32(self):
        """Test that float64 input reads back as its float32 rounding."""
        array = np.random.default_rng(7).random((5, 6), dtype=np.float64)
        write_pfm(self.path('f64.pfm'), array)
        back = read_pfm(self.path('f64.pfm'))
        self.assertEqual(back.dtype, np.float64)
        np.testing.assert_array_equal(back, array.astype(np.float32).astype(np.float64))
        np.testing.assert_allclose(back, array, rtol=2 ** -24, atol=0)
        write_pfm(self.path('again.pfm'), back)
        with open(self.path('f64.pfm'), 'rb') as f1, open(self.path('again.pfm'), 'rb') as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_big_endian_file(self):
        """Test that a positive scale means big-endian samples."""
        with open(self.path('be.pfm'), 'wb') as f:
            f.write(b'Pf\n2 1\n1.0\n')
            f.write(np.array([0.25, -7.5], dtype='>f4').tobytes())
        np.testing.assert_array_equal(read_pfm(self.path('be.pfm')), [[0.25, -7.5]])

    def test_rgb_pfm(self):
        """Test three-channel PFM."""
        rgb = np.random.default_rng(0).random((3, 4, 3)).astype(np.float32)
        write_pfm(self.path('rgb.pfm'), rgb)
        np.testing.assert_array_equal(read_pfm(self.path('rgb.pfm')), rgb)

    def test_malformed_header(self):
        """Test that an unknown magic raises FileOperationError."""
        with open(self.path('bad.pfm'), 'wb') as f:
            f.write(b'P6\n2 2\n255\n')
        with self.assertRaises(FileOperationError):
            read_pfm(self.path('bad.pfm'))

    def test_bad_dimensions(self):
        """Test that non-numeric and oversized dimensions are rejected."""
        with open(self.path('dims.pfm'), 'wb') as f:
            f.write(b'Pf\nwide 2\n-1.0\n')
        with self.assertRaises(FileOperationError):
            read_pfm(self.path('dims.pfm'))
        with open(self.path('huge.pfm'), 'wb') as f:
            f.write(b'Pf\n99999999 99999999\n-1.0\n')
        with self.assertRaises(FileOperationError) as ctx:
            read_pfm(self.path('huge.pfm'))
        self.assertIn('overflow', str(ctx.exception))

    def test_truncated_data(self):
        """Test that short payloads are rejected."""
        with open(self.path('short.pfm'), 'wb') as f:
            f.write(b'Pf\n4 4\n-1.0\n')
            f.write(np.zeros(5, dtype='<f4').tobytes())
        with self.assertRaises(FileOperationError):
            read_pfm(self.path('short.pfm'))

    def test_nan_marks_invalid(self):
        """Test that NaN round-trips as an invalid pixel."""
        d = DisparityMap(np.array([[1.5, 2.0], [3.0, 4.0]]), np.array([[True, False], [True, True]]))
        write_map(d, self.path('d.pfm'))
        back = read_map(self.path('d.pfm'))
        self.assertIsInstance(back, DisparityMap)
        self.assertEqual(back.valid.tolist(), d.valid.tolist())
        self.assertEqual(back.values[0, 0], 1.5)

    def test_rgb_map_rejected(self):
        """Test that a PF file cannot be read as a map."""
        write_pfm(self.path('rgb.pfm'), np.zeros((2, 2, 3)))
        with self.assertRaises(FileOperationError):
            PfmCodec().read(self.path('rgb.pfm'), 'disparity')


class TestPng16(MapIoTestCase):
    """Test 16-bit PNG maps with quantization sidecars."""

    def test_quantization_and_sidecar(self):
        """Test stored values, sentinel and sidecar contents."""
        depth = DepthMap(np.array([[1.2344, 0.0], [2.0, 65.0]]))
        write_map(depth, self.path('z.png'), scale=1000.0)
        with open(self.path('z.png.json'), 'r', encoding='utf-8') as f:
            sidecar = json.load(f)
        self.assertEqual(sidecar, {'scale': 1000.0, 'offset': 0.0, 'valid_sentinel': 65535})
        with Image.open(self.path('z.png')) as image:
            stored = np.array(image)
        self.assertEqual(stored.tolist(), [[1234, 65535], [2000, 65000]])

        back = read_map(self.path('z.png'), kind='depth')
        self.assertIsInstance(back, DepthMap)
        self.assertEqual(back.valid.tolist(), [[True, False], [True, True]])
        self.assertAlmostEqual(back.values[0, 0], 1.234)

    def test_offset_for_signed_disparity(self):
        """Test that an offset stores negative disparities."""
        d = DisparityMap(np.array([[-3.5, 0.0, 2.25]]))
        write_map(d, self.path('d.png'), scale=100.0, offset=32768.0)
        back = read_map(self.path('d.png'))
        np.testing.assert_allclose(back.values, d.values)

    def test_overflow_rejected(self):
        """Test that out-of-range values raise instead of wrapping."""
        with self.assertRaises(FileOperationError):
            write_map(DisparityMap(np.array([[-1.0]])), self.path('neg.png'))
        with self.assertRaises(FileOperationError):
            write_map(DepthMap(np.array([[100.0]])), self.path('big.png'))

    def test_sentinel_collision_rejected(self):
        """Test that a valid value quantizing to the sentinel is rejected."""
        with self.assertRaises(FileOperationError):
            write_map(DisparityMap(np.array([[65.535]])), self.path('s.png'))

    def test_missing_sidecar_uses_defaults(self):
        """Test reading without a sidecar."""
        Image.fromarray(np.array([[500, 65535]], dtype=np.uint16)).save(self.path('raw.png'))
        with self.assertLogs('map_io', level='WARNING'):
            back = read_map(self.path('raw.png'))
        self.assertAlmostEqual(back.values[0, 0], 0.5)
        self.assertFalse(back.valid[0, 1])

    def test_malformed_sidecar(self):
        """Test that a broken sidecar raises FileOperationError."""
        write_map(DepthMap(np.ones((2, 2))), self.path('m.png'))
        with open(self.path('m.png.json'), 'w', encoding='utf-8') as f:
            f.write('{not json')
        with self.assertRaises(FileOperationError):
            read_map(self.path('m.png'), kind='depth')

    def test_confidence_kind(self):
        """Test reading a map as confidence."""
        write_map(ConfidenceMap(np.array([[0.25, 1.0]])), self.path('c.png'))
        conf = read_map(self.path('c.png'), kind='confidence')
        self.assertIsInstance(conf, ConfidenceMap)
        np.testing.assert_allclose(conf.values, [[0.25, 1.0]])


class TestFactory(MapIoTestCase):
    """Test codec selection."""

    def test_create(self):
        """Test codec creation by name."""
        self.assertIsInstance(MapCodecFactory.create('pfm'), PfmCodec)
        self.assertIsInstance(MapCodecFactory.create('PNG16'), Png16Codec)
        with self.assertRaises(ValidationError):
            MapCodecFactory.create('exr')

    def test_format_for_path(self):
        """Test suffix inference."""
        self.assertEqual(MapCodecFactory.format_for_path('a/b.PFM'), 'pfm')
        self.assertEqual(MapCodecFactory.format_for_path('x.png'), 'png16')
        with self.assertRaises(ValidationError):
            MapCodecFactory.format_for_path('x.tiff')

    def test_missing_file(self):
        """Test that reading a missing map raises FileOperationError."""
        with self.assertRaises(FileOperationError):
            read_map(self.path('nothing.pfm'))

    def test_unknown_kind(self):
        """Test that unknown map kinds are rejected."""
        write_pfm(self.path('k.pfm'), np.ones((2, 2)))
        with self.assertRaises(ValidationError):
            read_map(self.path('k.pfm'), kind='normals')


class TestImages(MapIoTestCase):
    """Test image helpers."""

    def test_png8_round_trip(self):
        """Test 8-bit PNG scaling."""
        image = np.array([[0.0, 0.5], [1.0, 2.0]])
        write_png8(self.path('g.png'), image)
        back = read_image(self.path('g.png'))
        np.testing.assert_allclose(back, [[0.0, 128 / 255], [1.0, 1.0]])

    def test_rgb_image(self):
        """Test that RGB images keep their channels."""
        rgb = np.zeros((2, 3, 3))
        rgb[..., 1] = 1.0
        write_png8(self.path('rgb.png'), rgb)
        back = read_image(self.path('rgb.png'))
        self.assertEqual(back.shape, (2, 3, 3))
        self.assertEqual(back[0, 0].tolist(), [0.0, 1.0, 0.0])

    def test_mask_png(self):
        """Test that masks come back binary."""
        mask = np.array([[True, False], [False, True]])
        write_png8(self.path('mask.png'), mask)
        conf = read_mask_png(self.path('mask.png'))
        self.assertTrue(conf.is_binary())
        self.assertEqual(conf.as_mask().tolist(), mask.tolist())

    def test_image_suffix_checked(self):
        """Test unsupported image types."""
        open(self.path('notes.txt'), 'w').close()
        with self.assertRaises(FileOperationError):
            read_image(self.path('notes.txt'))

    def test_pfm_image(self):
        """Test reading a PFM as an image."""
        write_pfm(self.path('img.pfm'), np.full((2, 2), 0.75))
        np.testing.assert_allclose(read_image(self.path('img.pfm')), 0.75)

    def test_write_json_sorted(self):
        """Test that JSON keys are sorted."""
        write_json(self.path('x.json'), {'b': 1, 'a': 2})
        with open(self.path('x.json'), 'r', encoding='utf-8') as f:
            text = f.read()
        self.assertLess(text.index('"a"'), text.index('"b"'))


if __name__ == '__main__':
    unittest.main()
