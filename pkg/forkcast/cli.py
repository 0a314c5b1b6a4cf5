"""Command line entry point: ``forkcast <command> [options]``.

Each subcommand is a Command subclass with ``options``/``configure``/``run``
hooks; ``discover`` collects them the same way diversity penalties are
collected.
"""
import argparse
import inspect
import json
import logging
import os
import sys

import numpy as np

from forkcast import (baselines, config as cfg, inference, log, metrics,
                      persistence, scenegen, training)
from forkcast.errors import ArgumentError, ForkcastError

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = 'effective_config.json'


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise ArgumentError('%s %s does not exist' % (what, path))
    return path


class Command(object):
    """Base class of every subcommand."""
    name = None
    help = None

    def __init__(self):
        self.config = None
        self.out = None
        self.args = None

    def options(self, parser):
        parser.add_argument('--config', metavar='PATH', default=None,
                            help='JSON config file (default: built-in '
                                 'defaults)')
        parser.add_argument('--set', metavar='KEY=VALUE', action='append',
                            default=[], dest='overrides',
                            help='Dotted override such as model.d_enc=64; '
                                 'repeatable (default: none)')
        parser.add_argument('--seed', type=int, default=None,
                            help='Seed for generation and training '
                                 '(default: from config, 0)')
        parser.add_argument('--out', metavar='DIR', default='.',
                            help='Output directory (default: current '
                                 'directory)')
        parser.add_argument('-v', '--verbose', action='count', default=0,
                            help='Lower the log threshold one level per flag '
                                 '(default: MVT_LOG or warning)')

    def flag_overrides(self, args):
        """Overrides derived from dedicated flags; applied after --set."""
        out = []
        if args.seed is not None:
            out += ['seed=%d' % args.seed, 'train.seed=%d' % args.seed]
        return out

    def configure(self, args):
        self.args = args
        overrides = list(args.overrides) + self.flag_overrides(args)
        self.config = cfg.load_config(args.config, overrides)
        self.out = args.out
        if not os.path.isdir(self.out):
            os.makedirs(self.out)
        text = self.config.dumps()
        sys.stdout.write(text + '\n')
        with open(os.path.join(self.out, EFFECTIVE_CONFIG), 'w') as fd:
            fd.write(text + '\n')

    def path(self, name):
        return os.path.join(self.out, name)

    def run(self):
        raise NotImplementedError


class Generate(Command):
    name = 'generate'
    help = 'Generate a file of forking scenarios.'

    def options(self, parser):
        super(Generate, self).options(parser)
        parser.add_argument('--n', type=int, default=20,
                            help='Number of scenarios (default: 20)')
        parser.add_argument('--j', type=int, default=None,
                            help='Futures per scenario (default: from '
                                 'config, 2)')
        parser.add_argument('--output', default='scenarios.jsonl',
                            help='File name inside --out (default: '
                                 'scenarios.jsonl)')

    def flag_overrides(self, args):
        out = super(Generate, self).flag_overrides(args)
        if args.j is not None:
            out.append('generator.j=%d' % args.j)
        return out

    def run(self):
        if self.args.n < 1:
            raise ArgumentError('--n must be >= 1, got %d' % self.args.n)
        scenario_set = scenegen.generate_scenario_set(
            self.config.generator, self.config.seed, self.args.n)
        path = self.path(self.args.output)
        scenegen.write_scenarios(scenario_set, path)
        summary = scenegen.summarize(scenario_set)
        summary['path'] = path
        sys.stdout.write(json.dumps(summary, sort_keys=True) + '\n')
        return summary


class _ModelCommand(Command):
    """Shared flags of the commands that read scenarios and a model."""

    def options(self, parser):
        super(_ModelCommand, self).options(parser)
        parser.add_argument('--scenarios', metavar='PATH', required=True,
                            help='Scenario file written by generate')
        parser.add_argument('--scale', choices=('fine', 'multi'),
                            default=None,
                            help='Decode at the fine scale only or at every '
                                 'configured scale (default: from config, '
                                 'multi)')
        parser.add_argument('--strict-bounds', action='store_true',
                            default=False,
                            help='Fail on points outside the grid instead of '
                                 'clamping them (default: clamp)')

    def flag_overrides(self, args):
        out = super(_ModelCommand, self).flag_overrides(args)
        if args.scale is not None:
            out.append('model.use_multi_scale=%s' %
                       json.dumps(args.scale == 'multi'))
        if args.strict_bounds:
            out.append('inference.strict_bounds=true')
        return out

    def scenarios(self):
        path = _require_file(self.args.scenarios, 'scenario file')
        return scenegen.read_scenarios(path)


def model_config_for(scenario_set, model_config):
    """Aligns the configured scales and classes with the scenario grids."""
    first = next(iter(scenario_set))
    scales = [list(first.grid.shape), list(first.coarse_grid.shape)]
    if not model_config.use_multi_scale:
        scales = scales[:1]
    changes = {'scales': scales,
               'k_classes': first.semantic_maps[0].k_classes,
               'h': first.h}
    if any(getattr(model_config, k) != v for k, v in changes.items()):
        logger.info(log.kv(aligned_scales=scales,
                           k_classes=changes['k_classes'], h=first.h))
    return model_config.replace(**changes)


class Train(_ModelCommand):
    name = 'train'
    help = 'Train a model and write a checkpoint plus a loss log.'

    def options(self, parser):
        super(Train, self).options(parser)
        parser.add_argument('--resume', metavar='CHECKPOINT', default=None,
                            help='Continue training from this checkpoint '
                                 '(default: start from scratch)')
        parser.add_argument('--checkpoint', default='model.mvck',
                            help='Checkpoint file name inside --out '
                                 '(default: model.mvck)')
        parser.add_argument('--loss-log', default='loss.csv',
                            help='Loss log file name inside --out (default: '
                                 'loss.csv)')

    def run(self):
        scenario_set = self.scenarios()
        if not len(scenario_set):
            raise ArgumentError('scenario file %s is empty' %
                                self.args.scenarios)
        train_config = self.config.train
        model, start_epoch, optimizer_state = None, 0, None
        model_config = model_config_for(scenario_set, self.config.model)
        if self.args.resume:
            model, ckpt = persistence.load_model(
                _require_file(self.args.resume, 'checkpoint'), model_config)
            model = model.to(cfg.torch_dtype(train_config.dtype))
            start_epoch = int(ckpt.metadata.get('epoch', 0))
            if ckpt.optimizer:
                optimizer_state = (ckpt.optimizer,
                                   ckpt.metadata.get('optimizer_steps', {}))
            logger.info(log.kv(resume=self.args.resume, epoch=start_epoch))
        ckpt_path = self.path(self.args.checkpoint)
        log_path = self.path(self.args.loss_log)
        history = []
        if start_epoch and os.path.exists(log_path):
            history = training.read_loss_log(log_path)[:start_epoch]
        training.write_loss_log(history, log_path)

        def on_epoch(epoch, parts, trained, optimizer):
            history.append(parts)
            training.write_loss_log([parts], log_path, epoch - 1, append=True)
            arrays, steps = training.optimizer_arrays(
                optimizer, trained.store, train_config)
            meta = persistence.model_metadata(trained, train_config, history,
                                              epoch, steps)
            persistence.save(trained.store, meta, ckpt_path, arrays)

        result = training.train(scenario_set, model_config, train_config,
                                model=model, start_epoch=start_epoch,
                                optimizer_state=optimizer_state,
                                on_epoch=on_epoch)
        summary = {'checkpoint': ckpt_path, 'loss_log': log_path,
                   'epochs': result.epochs_run}
        if history:
            summary['final_loss'] = history[-1].total
        sys.stdout.write(json.dumps(summary, sort_keys=True) + '\n')
        return result


class Predict(_ModelCommand):
    name = 'predict'
    help = 'Predict K trajectories per scenario.'

    def options(self, parser):
        super(Predict, self).options(parser)
        parser.add_argument('--checkpoint', metavar='PATH', default=None,
                            help='Model checkpoint (required unless '
                                 'inference.model=linear)')
        parser.add_argument('--k', type=int, default=None,
                            help='Trajectories per scenario (default: from '
                                 'config, 20)')
        parser.add_argument('--gamma', type=float, default=None,
                            help='Diversity penalty gamma0 (default: from '
                                 'config, 1.0)')
        parser.add_argument('--jobs', type=int, default=None,
                            help='Scenarios predicted concurrently (default: '
                                 'from config, 1)')
        parser.add_argument('--emit-heatmaps', action='store_true',
                            default=False,
                            help='Write per-step beliefs as CSV and PGM '
                                 '(default: off)')
        parser.add_argument('--fit-scenarios', metavar='PATH', default=None,
                            help='Scenarios the linear baseline is fitted on '
                                 '(default: the predicted scenarios\' '
                                 'histories)')
        parser.add_argument('--output', default='predictions.jsonl',
                            help='File name inside --out (default: '
                                 'predictions.jsonl)')

    def flag_overrides(self, args):
        out = super(Predict, self).flag_overrides(args)
        for flag in ('k', 'gamma', 'jobs'):
            value = getattr(args, flag, None)
            if value is not None:
                out.append('inference.%s=%r' % (flag, value))
        if getattr(args, 'emit_heatmaps', False):
            out.append('inference.emit_heatmaps=true')
        return out

    def predictions(self, scenario_set):
        config = self.config.inference
        if config.model == 'linear':
            fit_set = scenario_set
            use_futures = False
            if self.args.fit_scenarios:
                fit_set = scenegen.read_scenarios(
                    _require_file(self.args.fit_scenarios, 'scenario file'))
                use_futures = True
            baseline = baselines.fit_linear(fit_set, use_futures=use_futures)
            return [baseline.predict_scenario(s, config.k)
                    for s in scenario_set]
        model, _ = persistence.load_model(
            _require_file(self.args.checkpoint, 'checkpoint'),
            self.model_config(scenario_set))
        return inference.predict_all(model, scenario_set, config, config.jobs)

    def model_config(self, scenario_set):
        """Stored config unless --scale asks for decoders it lacks.

        Decoding reads only the fine scale, so a multi-scale checkpoint
        serves ``--scale fine`` as is.
        """
        if self.args.scale != 'multi':
            return None
        ckpt = persistence.load_checkpoint(self.args.checkpoint)
        stored = cfg.ModelConfig.from_dict(ckpt.metadata.get('model'),
                                           prefix='model')
        return model_config_for(scenario_set,
                                stored.replace(use_multi_scale=True))

    def run(self):
        scenario_set = self.scenarios()
        predictions = self.predictions(scenario_set)
        path = self.path(self.args.output)
        inference.write_predictions(predictions, path)
        if self.config.inference.emit_heatmaps:
            by_id = scenario_set.by_id()
            for p in predictions:
                inference.export_heatmaps(p, by_id[p.scenario_id].grid,
                                          self.path('heatmaps'))
        sys.stdout.write(json.dumps({'predictions': path,
                                     'scenarios': len(predictions),
                                     'k': self.config.inference.k},
                                    sort_keys=True) + '\n')
        return predictions


class Eval(Predict):
    name = 'eval'
    help = 'Evaluate predictions against the scenarios\' futures.'

    def options(self, parser):
        super(Eval, self).options(parser)
        parser.add_argument('--predictions', metavar='PATH', default=None,
                            help='Prediction file; predicts inline from '
                                 '--checkpoint when omitted. A prediction '
                                 'file holds no beliefs, so NLL is not '
                                 'reported for it (default: none)')

    def flag_overrides(self, args):
        out = super(Eval, self).flag_overrides(args)
        if args.k is not None:
            out.append('eval.k=%d' % args.k)
        return out

    def run(self):
        scenario_set = self.scenarios()
        beliefs = {}
        if self.args.predictions:
            records = inference.read_predictions(
                _require_file(self.args.predictions, 'prediction file'))
            predictions = {sid: r.trajectories for sid, r in records.items()}
        else:
            made = self.predictions(scenario_set)
            predictions = {p.scenario_id: p.trajectories for p in made}
            beliefs = {p.scenario_id: p.beliefs for p in made if p.beliefs}
        if not beliefs:
            logger.warning(log.kv(nll='skipped', reason='no beliefs'))
        reports = metrics.evaluate(list(scenario_set), predictions, beliefs,
                                   self.config.eval)
        metrics.write_reports(reports, self.path('eval.json'))
        table = metrics.format_table(reports)
        with open(self.path('eval_table.txt'), 'w') as fd:
            fd.write(table + '\n')
        metrics.write_rows(metrics.per_scenario_rows(
            list(scenario_set), predictions, self.config.eval.k),
            self.path('eval_per_scenario.csv'))
        sys.stdout.write(table + '\n')
        return reports


def discover(namespace=None):
    """Maps command names to Command subclasses defined in ``namespace``."""
    namespace = namespace or globals()
    return dict((member.name, member) for member in namespace.values()
                if inspect.isclass(member) and issubclass(member, Command)
                and member.name)


def build_parser(commands=None):
    commands = commands or discover()
    parser = argparse.ArgumentParser(
        prog='forkcast', description='Multi-future trajectory prediction on '
                                     'forking gridworld scenarios.')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True
    instances = {}
    for name in sorted(commands):
        command = commands[name]()
        command.options(sub.add_parser(name, help=command.help))
        instances[name] = command
    return parser, instances


def report_error(exc, stream=None):
    stream = stream or sys.stderr
    stream.write(json.dumps(exc.to_record(), sort_keys=True) + '\n')
    return exc.exit_code


def main(argv=None):
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    log.setup_logging(args.verbose)
    command = commands[args.command]
    try:
        command.configure(args)
        command.run()
    except ForkcastError as exc:
        logger.debug('command failed', exc_info=True)
        return report_error(exc)
    except (IOError, OSError) as exc:
        return report_error(ForkcastError('I/O error: %s' % exc))
    except np.linalg.LinAlgError as exc:
        return report_error(ForkcastError('linear algebra failure: %s' % exc))
    return 0


if __name__ == '__main__':
    sys.exit(main())
