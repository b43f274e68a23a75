import json
import time

from celery import Celery # docs: https://docs.celeryq.dev/en/stable/userguide/tasks.html#basics

from .models import ExperimentConfig, SweepPoint
from .utils import CONFIG, setup_logger, short_hash

logger = setup_logger(__name__)

celery = Celery(__name__) # celery app
celery.conf.broker_url = CONFIG.get('CELERY_BROKER_URL') or 'memory://'
celery.conf.result_backend = CONFIG.get('CELERY_RESULT_BACKEND') or 'cache+memory://'
celery.conf.task_routes = {
            'semcomm.*': { 'queue': 'semcomm', 'routing_key' : 'semcomm' },
        }
celery.conf.task_default_exchange = 'semcomm'
celery.conf.task_default_exchange_type = 'direct'
celery.conf.task_default_routing_key = 'semcomm'
celery.conf.task_serializer = 'json'
celery.conf.result_serializer = 'json'

# without a broker every sweep point runs in-process with the same task code
# failures are stored on the result and raised by .get(), as with a worker
celery.conf.task_always_eager = not CONFIG.get('CELERY_BROKER_URL')
celery.conf.task_eager_propagates = False

_runners = {} # experiment config hash -> ExperimentRunner with its loaded data

def register_runner(config:str, runner):
    """ In-process (eager) tasks reuse the data already loaded by the dispatching runner """
    _runners[short_hash(config)] = runner

@celery.task(name='semcomm.train_point', bind=True)
def train_point(self, config:str, point:str) -> str: # json of ExperimentConfig and SweepPoint
    from .ExperimentRunner import ExperimentRunner

    time_start = time.time()
    key = short_hash(config)
    runner = _runners.get(key)
    if runner is None:
        runner = ExperimentRunner(ExperimentConfig(**json.loads(config)))
        _runners[key] = runner

    sweep_point = SweepPoint(**json.loads(point))
    rows = runner.execute_point(sweep_point)

    logger.info(f'celery_tasks::train_point(): "{sweep_point.key}" done in {round(time.time() - time_start, 1)}s ({len(rows)} rows)')
    return json.dumps(rows)
