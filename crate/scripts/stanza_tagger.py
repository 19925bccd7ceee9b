#!/usr/bin/env python3
"""Entity tagger worker backed by Stanza NER.

Reads {"text": ...} lines on stdin and answers each with
{"entities": [{"start", "end", "label"}]} (character offsets) or
{"error": ...}.

    qagen config:  [tagger] name = "command"
                   command = ["python3", "scripts/stanza_tagger.py", "--lang", "en"]
"""
import argparse
import json
import sys


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lang", default="en")
    args = ap.parse_args()
    import stanza

    nlp = stanza.Pipeline(args.lang, processors="tokenize,ner", verbose=False)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            text = json.loads(line)["text"]
            doc = nlp(text)
            ents = [{"start": e.start_char, "end": e.end_char, "label": e.type} for e in doc.ents]
            reply = {"entities": ents}
        except Exception as e:
            reply = {"error": f"{type(e).__name__}: {e}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
