#!/usr/bin/env python3
"""
Test script for bit-identical outputs across runs and thread counts
"""

import sys
import os
# Add project root to Python path
project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.insert(0, project_root)

import json
import shutil
import tempfile
import unittest
from io import StringIO
from unittest.mock import patch

import numpy as np

from disparity_core import DepthMap
from main import main
from map_io import write_map, write_png8
from optics_simulator import render_random_dot_chart

GLOBAL_CONFIG = {
    'match': {'window': 9, 'search_range': 6},
    'fgs': {'lambda': 32.0},
    'scene': {'width': 64, 'height': 48, 'disparity_range': 2.0},
}


class TestDeterminism(unittest.TestCase):
    """Every command, twice with one thread and once with four."""

    def setUp(self):
        """Set up inputs shared by all runs."""
        self.temp_dir = tempfile.mkdtemp()
        chart = render_random_dot_chart(64, 48, seed=11)
        depth = np.tile(np.linspace(1.8, 2.4, 64), (48, 1))
        self.image = os.path.join(self.temp_dir, 'image.png')
        self.depth = os.path.join(self.temp_dir, 'depth.pfm')
        self.camera = os.path.join(self.temp_dir, 'camera.json')
        self.config = os.path.join(self.temp_dir, 'config.json')
        write_png8(self.image, chart)
        write_map(DepthMap(depth), self.depth)
        with open(self.camera, 'w', encoding='utf-8') as f:
            json.dump({'focal_length_m': 0.05, 'f_number': 2.0, 'focus_distance_m': 2.0,
                       'calibrate_alpha': True}, f)
        with open(self.config, 'w', encoding='utf-8') as f:
            json.dump(GLOBAL_CONFIG, f)

    def tearDown(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir)

    def run_all(self, name, threads):
        """Run the stage chain and the pipeline; return the bytes of every output."""
        out = os.path.join(self.temp_dir, name)
        os.makedirs(out)

        def p(filename):
            return os.path.join(out, filename)

        base = ['--seed', '5', '--threads', str(threads), '--config', self.config, '--log-level', 'ERROR']
        commands = [
            ['simulate', '--image', self.image, '--depth', self.depth, '--camera', self.camera,
             '--out-left', p('left.pfm'), '--out-right', p('right.pfm')],
            ['match', '--left', p('left.pfm'), '--right', p('right.pfm'),
             '--out-disparity', p('sparse.pfm'), '--out-mask', p('mask.png')],
            ['complete', '--sparse', p('sparse.pfm'), '--guide', self.image,
             '--out-dense', p('dense.pfm'), '--out-conf', p('conf.pfm')],
            ['refine', '--dense', p('dense.pfm'), '--conf', p('conf.pfm'), '--guide', self.image,
             '--out', p('refined.pfm')],
            ['pipeline', '--scene', 'box-on-plane', '--out-dir', p('run')],
        ]
        with patch('sys.stdout', new_callable=StringIO):
            for command in commands:
                self.assertEqual(main(base + command), 0, command[0])

        outputs = {}
        for root, _, files in os.walk(out):
            for filename in files:
                if filename == 'manifest.json':
                    continue
                path = os.path.join(root, filename)
                with open(path, 'rb') as f:
                    outputs[os.path.relpath(path, out)] = f.read()
        return outputs

    def test_bit_identical(self):
        """Test repeated runs and thread counts."""
        first = self.run_all('first', 1)
        second = self.run_all('second', 1)
        threaded = self.run_all('threaded', 4)
        self.assertEqual(sorted(first), sorted(second))
        self.assertIn(os.path.join('run', 'refined.pfm'), first)
        for name, data in first.items():
            self.assertEqual(data, second[name], name)
            self.assertEqual(data, threaded[name], name)


if __name__ == '__main__':
    unittest.main()
