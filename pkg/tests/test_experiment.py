import json
import os
import sys
import tempfile

import numpy as np
import pandas as pd

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli.experiment_runner import ExperimentRunner
from src.cli.main import run
from src.cli.synthetic import generate_scene, write_scene
from src.esmlr.hsi_data import HsiCube, load_cube, save_cube
from src.models.config import SECTIONS, load_config_from_yaml
from src.utils import raster_io


def _write_config(tmp: str, cube: str, labels: str, **fields) -> str:
    document = {
        'data': {'cube': cube, 'ground_truth': labels},
        'model': {'variant': 'ESMLR', 'mode': 'spectral', 'L': 300},
        'split': {'q': 10},
        'run': {'trials': 10, 'base_seed': 0, 'output_dir': os.path.join(tmp, 'out'), 'threads': 1},
    }
    for key, value in fields.items():
        section = next(name for name, names in SECTIONS.items() if key in names)
        document.setdefault(section, {})[key] = value
    path = os.path.join(tmp, 'config.json')
    with open(path, 'w') as fh:
        json.dump(document, fh)
    return path


def _scene(tmp: str):
    cube, gt = generate_scene(height=40, width=40, bands=20, classes=3, seed=0)
    return write_scene(os.path.join(tmp, 'scene'), cube, gt)


def _read(path: str) -> bytes:
    with open(path, 'rb') as fh:
        return fh.read()


def test_synthetic_scene_esmlr_beats_threshold_and_smlr():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        means = {}
        for variant in ('ESMLR', 'SMLR'):
            out = os.path.join(tmp, variant)
            config = load_config_from_yaml(_write_config(tmp, cube, labels), {'variant': variant, 'output_dir': out})
            summary = ExperimentRunner(config).cmd_experiment()
            means[variant] = summary['metrics']['oa_mean']
            assert summary['metrics']['trials'] == 10

    assert means['ESMLR'] >= 0.95, means
    assert means['ESMLR'] >= means['SMLR'], means


def test_experiment_outputs_and_map_consistency():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=2, full_map=True)
        assert run(['experiment', '--config', config_path, '--mode', 'mfl']) == 0

        out = os.path.join(tmp, 'out')
        for name in ('trials.csv', 'timings.csv', 'summary.json', 'legend.csv', 'manifest.json',
                     'map_trial0.pgm', 'map_trial1.pgm', 'fullmap_trial0.pgm'):
            assert os.path.exists(os.path.join(out, name)), name

        with open(os.path.join(out, 'summary.json')) as fh:
            summary = json.load(fh)
        with open(os.path.join(out, 'manifest.json')) as fh:
            manifest = json.load(fh)
        assert manifest['status'] == 'ok'
        assert manifest['trial_seeds'] == [0, 1]
        assert manifest['config']['model']['mode'] == 'mfl'

        gt = np.fromfile(labels, dtype='<u2').reshape(40, 40)
        for trial in (0, 1):
            label_map = raster_io.read_pgm(os.path.join(out, f'map_trial{trial}.pgm'))
            scored = label_map > 0
            assert np.all(gt[scored] > 0)
            assert float(np.mean(label_map[scored] == gt[scored])) == summary['trials'][trial]['oa']

        full = raster_io.read_pgm(os.path.join(out, 'fullmap_trial0.pgm'))
        assert full.min() >= 1 and full.max() <= 3

        legend = pd.read_csv(os.path.join(out, 'legend.csv'))
        assert legend.columns.tolist() == ['label', 'class_name', 'r', 'g', 'b']
        assert legend['label'].tolist() == [1, 2, 3]


def test_saved_mfl_models_describe_their_emaps():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=1, mode='mfl', save_models=True)
        assert run(['experiment', '--config', config_path]) == 0

        with open(os.path.join(tmp, 'out', 'models', 'model_trial0.json')) as fh:
            pipeline = json.load(fh)['pipeline']

    emaps = pipeline['emaps']
    assert emaps['thresholds'] == [100, 200, 500, 1000] and emaps['connectivity'] == 4
    assert emaps['features'] == emaps['components'] * 9
    assert pipeline['mfl_layout'] == {'spectral_rows': 20, 'spatial_rows': emaps['features']}
    assert pipeline['input_dim'] == 20 + emaps['features']


def test_reruns_and_parallel_runs_give_identical_trials_csv():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=3)
        outputs = []
        for k, threads in enumerate(('1', '1', '3')):
            out = os.path.join(tmp, f'run{k}')
            assert run(['experiment', '--config', config_path, '--output_dir', out, '--threads', threads]) == 0
            outputs.append(_read(os.path.join(out, 'trials.csv')))

    assert outputs[0] == outputs[1] == outputs[2]


def test_single_value_sweep_matches_experiment():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=2)
        assert run(['experiment', '--config', config_path, '--b', '-8',
                    '--output_dir', os.path.join(tmp, 'exp')]) == 0
        assert run(['sweep', '--config', config_path, '--axis', 'b', '--values', '-8',
                    '--output_dir', os.path.join(tmp, 'sweep')]) == 0

        trials = pd.read_csv(os.path.join(tmp, 'exp', 'trials.csv'))
        sweep = pd.read_csv(os.path.join(tmp, 'sweep', 'sweep_b.csv'))

    assert sweep['axis'].tolist() == ['b', 'b']
    pd.testing.assert_frame_equal(sweep.drop(columns=['axis', 'value']), trials)


def test_q_sweep_is_long_form():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=2, L=50)
        assert run(['sweep', '--config', config_path, '--axis', 'Q', '--values', '5,10']) == 0
        sweep = pd.read_csv(os.path.join(tmp, 'out', 'sweep_Q.csv'))

    assert sweep['value'].tolist() == [5, 5, 10, 10]
    assert sweep['trial'].tolist() == [0, 1, 0, 1]


def test_emaps_command_dumps_stack():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels)
        assert run(['emaps', '--config', config_path]) == 0
        stack = load_cube(os.path.join(tmp, 'out', 'emaps.bsq'))
        extras = raster_io.read_header_extras(os.path.join(tmp, 'out', 'emaps.bsq'))

    assert stack.bands % 9 == 0
    assert len(extras['layout']) == stack.bands
    assert stack.values.min() >= 0.0 and stack.values.max() <= 1.0


def test_constant_cube_emaps_are_zero():
    with tempfile.TemporaryDirectory() as tmp:
        cube_path = os.path.join(tmp, 'flat.bsq')
        save_cube(cube_path, HsiCube(values=np.full((6, 12, 12), 0.4)))
        config_path = _write_config(tmp, cube_path, os.path.join(tmp, 'unused.labels'))
        assert run(['emaps', '--config', config_path]) == 0
        stack = load_cube(os.path.join(tmp, 'out', 'emaps.bsq'))

    assert stack.bands == 9
    assert not stack.values.any()


def test_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=1)

        assert run(['experiment', '--config', os.path.join(tmp, 'missing.json')]) == 1
        assert run(['experiment', '--config', config_path, '--cube', os.path.join(tmp, 'missing.bsq')]) == 1
        assert run(['experiment', '--config', config_path, '--variant', 'K-SMLR', '--mode', 'mfl']) == 1
        assert run(['sweep', '--config', config_path, '--axis', 'L', '--values', '100,50']) == 1

        # corrupt the cube so its size no longer matches the header
        with open(cube, 'ab') as fh:
            fh.write(b'\0\0\0\0')
        assert run(['experiment', '--config', config_path]) == 2


def test_failed_trial_flags_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        cube, labels = _scene(tmp)
        config_path = _write_config(tmp, cube, labels, trials=1)
        code = run(['experiment', '--config', config_path, '--q', '100000', '--cap_rule', 'false'])
        with open(os.path.join(tmp, 'out', 'manifest.json')) as fh:
            manifest = json.load(fh)

    assert code == 2
    assert manifest['status'] == 'failed'
    assert 'requested' in manifest['error']


if __name__ == "__main__":
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"ok  {name}")
