import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from conftest import toy_document
from main import main
from training import read_training_log

ROOT = Path(__file__).resolve().parent.parent


def write_config(path: Path, document: dict) -> str:
    path.write_text(yaml.safe_dump(document))
    return str(path)


def only_run(run_root: Path) -> Path:
    runs = [p for p in run_root.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


def train_toy(tmp_path, synth_root, **train_overrides) -> Path:
    config = write_config(tmp_path / 'toy.yaml', toy_document(synth_root, **train_overrides))
    assert main(['train', config, '--run-root', str(tmp_path / 'runs')]) == 0
    return only_run(tmp_path / 'runs')


# ===== SYNTH =====

def test_synth_writes_both_splits(tmp_path, capsys):
    out = tmp_path / 'synth'
    assert main(['synth', '--out', str(out), '--pairs', '3', '--val-pairs', '2', '--size', '32']) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest['splits'] == {'train': 3, 'val': 2}
    for split, count in (('train', 3), ('val', 2)):
        assert len(list((out / 'images' / split).glob('*.png'))) == count
        assert len(list((out / 'labels' / split).glob('*.png'))) == count
    label = np.asarray(Image.open(out / 'labels' / 'train' / '00000.png'))
    assert label.shape == (32, 32) and label.max() < 4


def test_synth_zero_val_pairs(tmp_path, capsys):
    out = tmp_path / 'synth'
    assert main(['synth', '--out', str(out), '--pairs', '2', '--val-pairs', '0', '--size', '32']) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest['splits'] == {'train': 2, 'val': 0}
    assert not list((out / 'images' / 'val').glob('*.png'))


def test_synth_repeats_byte_for_byte(tmp_path):
    for name in ('a', 'b'):
        assert main(['synth', '--out', str(tmp_path / name), '--pairs', '2', '--size', '32', '--night']) == 0
    first = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*.png'))
    assert first == sorted(p.relative_to(tmp_path / 'b') for p in (tmp_path / 'b').rglob('*.png'))
    for rel in first:
        assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()


def test_synth_rejects_bad_size(tmp_path, capsys):
    assert main(['synth', '--out', str(tmp_path / 's'), '--size', '50']) != 0
    assert '50' in capsys.readouterr().err


# ===== TRAIN AND EVAL =====

def test_train_then_eval(tmp_path, synth_root, capsys):
    run_dir = train_toy(tmp_path, synth_root)
    assert (run_dir / 'checkpoint_final.pt').exists()
    capsys.readouterr()

    assert main(['eval', str(run_dir / 'checkpoint_final.pt')]) == 0
    out = capsys.readouterr().out
    assert 'mIoU' in out
    record = json.loads((run_dir / 'eval_val.json').read_text())
    assert 0.0 <= record['miou'] <= 100.0
    assert len(record['per_class_iou']) == 19


def test_train_override_recorded(tmp_path, synth_root):
    config = write_config(tmp_path / 'toy.yaml', toy_document(synth_root))
    assert main(['train', config, '--override', 'base_lr=0.02', '--run-root', str(tmp_path / 'runs')]) == 0
    header = read_training_log(only_run(tmp_path / 'runs') / 'train_log.jsonl')[0]
    assert header['overrides'] == ['base_lr=0.02']
    assert header['config']['train']['base_lr'] == 0.02


def test_train_missing_root(tmp_path, capsys):
    missing = tmp_path / 'nowhere'
    config = write_config(tmp_path / 'toy.yaml', toy_document(missing))
    assert main(['train', config, '--run-root', str(tmp_path / 'runs')]) != 0
    assert str(missing) in capsys.readouterr().err


def test_eval_class_count_mismatch(tmp_path, synth_root, capsys):
    document = toy_document(synth_root, max_iterations=0)
    document['seg']['num_classes'] = 4
    config = write_config(tmp_path / 'toy.yaml', document)
    assert main(['train', config, '--run-root', str(tmp_path / 'runs')]) == 0
    run_dir = only_run(tmp_path / 'runs')
    capsys.readouterr()
    assert main(['eval', str(run_dir / 'checkpoint_final.pt')]) != 0
    assert 'classes' in capsys.readouterr().err


# ===== INFER =====

def test_infer_outputs_and_isolated_failures(tmp_path, synth_root):
    run_dir = train_toy(tmp_path, synth_root, max_iterations=0)
    good = synth_root / 'images' / 'val' / '00000.png'
    corrupt = tmp_path / 'corrupt.png'
    corrupt.write_bytes(b'not an image')
    odd = tmp_path / 'odd.png'
    Image.fromarray(np.zeros((30, 40, 3), dtype=np.uint8)).save(odd)
    out = tmp_path / 'pred'

    code = main(['infer', str(run_dir / 'checkpoint_final.pt'), str(good), str(corrupt), str(odd),
                 '--out', str(out), '--relight-preview'])
    assert code == 1
    assert sorted(p.name for p in out.iterdir()) == ['00000_color.png', '00000_relit.png', '00000_trainid.png']
    trainid = np.asarray(Image.open(out / '00000_trainid.png'))
    assert trainid.shape == (32, 32) and trainid.max() < 19


def test_infer_auto_pad_restores_size(tmp_path, synth_root):
    run_dir = train_toy(tmp_path, synth_root, max_iterations=0)
    odd = tmp_path / 'odd.png'
    Image.fromarray(np.full((30, 40, 3), 90, dtype=np.uint8)).save(odd)
    out = tmp_path / 'pred'
    assert main(['infer', str(run_dir / 'checkpoint_final.pt'), str(odd), '--out', str(out), '--auto-pad']) == 0
    assert np.asarray(Image.open(out / 'odd_trainid.png')).shape == (30, 40)
    assert np.asarray(Image.open(out / 'odd_color.png')).shape == (30, 40, 3)


def test_untrained_relight_preview_matches_input(tmp_path, synth_root):
    run_dir = train_toy(tmp_path, synth_root, max_iterations=0)
    image = synth_root / 'images' / 'train' / '00001.png'
    out = tmp_path / 'pred'
    assert main(['infer', str(run_dir / 'checkpoint_final.pt'), str(image), '--out', str(out),
                 '--relight-preview']) == 0
    original = np.asarray(Image.open(image)).astype(int)
    relit = np.asarray(Image.open(out / '00001_relit.png')).astype(int)
    assert np.abs(relit - original).max() <= 1


# ===== ABLATE =====

def test_ablate_report(tmp_path, synth_root, capsys):
    config = write_config(tmp_path / 'toy.yaml', toy_document(synth_root))
    assert main(['ablate', config, '--run-root', str(tmp_path / 'runs')]) == 0
    report = json.loads((only_run(tmp_path / 'runs') / 'ablation_report.json').read_text())
    assert set(report['runs']) == {'with_relight', 'without_relight'}
    assert report['orders_identical']
    assert 'delta' in capsys.readouterr().out


# ===== ACCEPTANCE =====

@pytest.mark.slow
def test_toy_config_overfits_synthetic_scenes(tmp_path):
    data = tmp_path / 'synth'
    assert main(['synth', '--out', str(data), '--pairs', '16', '--size', '64', '--classes', '4', '--night']) == 0
    config = str(ROOT / 'configs' / 'toy_synthetic.yaml')
    assert main(['train', config, '--override', f'source.root={data}', '--run-root', str(tmp_path / 'runs')]) == 0
    run_dir = only_run(tmp_path / 'runs')
    assert main(['eval', str(run_dir / 'checkpoint_final.pt'), '--split', 'train']) == 0
    record = json.loads((run_dir / 'eval_train.json').read_text())
    assert record['miou'] >= 85.0


@pytest.mark.slow
def test_repeated_training_is_byte_identical(tmp_path):
    data = tmp_path / 'synth'
    assert main(['synth', '--out', str(data), '--pairs', '16', '--size', '64', '--classes', '4']) == 0
    config = str(ROOT / 'configs' / 'toy_synthetic.yaml')
    runs = []
    for name in ('first', 'second'):
        run_root = tmp_path / name
        assert main(['train', config, '--override', f'source.root={data}', '--override', 'max_iterations=50',
                     '--run-root', str(run_root)]) == 0
        runs.append(only_run(run_root))
    first, second = runs
    assert (first / 'checkpoint_final.pt').read_bytes() == (second / 'checkpoint_final.pt').read_bytes()
    assert (first / 'train_log.jsonl').read_text() == (second / 'train_log.jsonl').read_text()


@pytest.mark.slow
def test_ablation_delta_recomputable_from_logs(tmp_path):
    data = tmp_path / 'synth'
    assert main(['synth', '--out', str(data), '--pairs', '16', '--size', '64', '--classes', '4', '--night']) == 0
    config = str(ROOT / 'configs' / 'toy_synthetic.yaml')
    assert main(['ablate', config, '--override', f'source.root={data}', '--override', 'max_iterations=50',
                 '--run-root', str(tmp_path / 'runs')]) == 0
    report = json.loads((only_run(tmp_path / 'runs') / 'ablation_report.json').read_text())
    finals = {}
    for key, run in report['runs'].items():
        evals = [r for r in read_training_log(run['log']) if r['type'] == 'eval']
        finals[key] = evals[-1]['miou']
    assert report['delta'] == finals['with_relight'] - finals['without_relight']
    assert report['orders_identical']
