from app.commands import evaluate, prepare, report, synthesize, train

COMMANDS = (synthesize, prepare, train, evaluate, report)
