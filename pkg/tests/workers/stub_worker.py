"""Scriptable protocol double for exercising the external-evaluator client.

Usage: stub_worker.py MODE
  ok        answer every request with fixed accuracies
  mismatch  answer with the wrong request id
  garbage   answer with a non-JSON line
  extra     answer with an unexpected extra field
  range     answer with an accuracy outside [0, 1]
  die       exit without answering the first request
  slow      sleep before answering
  badhello  emit a wrong handshake and exit
"""

import json
import sys
import time

CLEAN = 0.75
ADV = 0.5


def say(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "ok"
    if mode == "badhello":
        say({"hello": {"protocol": 99}})
        return
    say({"hello": {"protocol": 1}})

    for line in sys.stdin:
        req = json.loads(line)
        if mode == "die":
            return
        if mode == "slow":
            time.sleep(2.0)
        reply = {
            "id": req["id"] + (1 if mode == "mismatch" else 0),
            "clean_accuracy": 1.5 if mode == "range" else CLEAN,
            "adversarial_accuracies": [ADV] * len(req["epsilons"]),
            "status": "ok",
        }
        if mode == "garbage":
            sys.stdout.write("not json\n")
            sys.stdout.flush()
            continue
        if mode == "extra":
            reply["note"] = "surplus"
        say(reply)


if __name__ == "__main__":
    main()
