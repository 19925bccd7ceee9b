#!/usr/bin/env python3
"""Backend worker for Hugging Face T5 checkpoints.

Speaks the qagen worker protocol on stdin/stdout: one JSON request per line
with an "op" field, one {"ok", "result", "error"} reply per line.

    qagen config:  [backend] name = "process"
                   command = ["python3", "scripts/t5_worker.py", "--model", "google/t5-v1_1-large"]

Soft tokens: after enable_soft_prompt, input positions whose characters lie
inside a template literal use a trainable copy of the embedding row of
their token id instead of the shared embedding.
"""
import argparse
import json
import os
import sys

import torch
from transformers import AutoTokenizer, T5ForConditionalGeneration
from transformers.optimization import Adafactor

SOFT_FILE = "soft_prompt.pt"


class Worker:
    def __init__(self, model_name, device):
        self.device = torch.device(device)
        self.tok = AutoTokenizer.from_pretrained(model_name)
        self.model = T5ForConditionalGeneration.from_pretrained(model_name).to(self.device)
        self.soft = None  # (id -> row index, Parameter[rows, dim])
        self.opt = None

    # protocol helpers

    def markers(self):
        return {
            "mask_token": "<extra_id_0>",
            "sentinel_prefix": "<extra_id_",
            "sentinel_suffix": ">",
            "special_tokens": ["</s>", "<pad>", "<unk>"],
        }

    def info(self):
        return {
            "name": "t5:" + self.model.config.name_or_path,
            "markers": self.markers(),
            "embedding_dim": self.model.config.d_model,
        }

    def encode(self, text):
        enc = self.tok(text, add_special_tokens=False, return_offsets_mapping=True)
        return enc["input_ids"], enc["offset_mapping"]

    def tokenize(self, text):
        ids, offsets = self.encode(text)
        return [[i, s, e] for i, (s, e) in zip(ids, offsets) if e > s]

    def enable_soft_prompt(self, spec):
        emb = self.model.get_input_embeddings().weight
        ids = list(dict.fromkeys(spec["literal_token_ids"]))
        rows = torch.nn.Parameter(emb[ids].detach().clone())
        self.soft = ({t: k for k, t in enumerate(ids)}, rows)
        self.opt = None
        return None

    def embed(self, prompt):
        ids, offsets = self.encode(prompt["text"])
        ids = ids + [self.tok.eos_token_id]
        offsets = offsets + [(0, 0)]
        input_ids = torch.tensor([ids], device=self.device)
        embeds = self.model.get_input_embeddings()(input_ids)
        if self.soft is not None:
            index, rows = self.soft
            spans = prompt.get("literal_spans", [])
            for pos, (tid, (s, e)) in enumerate(zip(ids, offsets)):
                inside = any(sp["start"] <= s and e <= sp["end"] for sp in spans) and e > s
                if inside and tid in index:
                    embeds = embeds.clone()
                    embeds[0, pos] = rows[index[tid]]
        return embeds

    def labels(self, target, mask):
        ids, offsets = self.encode(target)
        kept = [i for i, (s, e) in zip(ids, offsets) if e > s]
        if len(kept) != len(mask):
            raise ValueError(f"loss mask has {len(mask)} entries for {len(kept)} target tokens")
        labels = [t if m else -100 for t, m in zip(kept, mask)] + [-100]
        full = kept + [self.tok.eos_token_id]
        return torch.tensor([full], device=self.device), torch.tensor([labels], device=self.device)

    def example_loss(self, ex):
        embeds = self.embed(ex["input"])
        decoder_ids, labels = self.labels(ex["target"], ex["loss_mask"])
        out = self.model(
            inputs_embeds=embeds,
            decoder_input_ids=self.model._shift_right(decoder_ids),
        )
        logp = torch.log_softmax(out.logits, dim=-1)
        active = labels[0] != -100
        if not active.any():
            return logp.sum() * 0.0, 0
        picked = logp[0, active].gather(1, labels[0, active].unsqueeze(1))
        return -picked.sum(), int(active.sum())

    def params(self):
        ps = list(self.model.parameters())
        if self.soft is not None:
            ps.append(self.soft[1])
        return ps

    def train_step(self, batch, optimizer, step):
        lr = optimizer["learning_rate"]
        if optimizer["schedule"] == "linear":
            lr *= max(0.0, 1.0 - step / max(1, optimizer["steps"]))
        if self.opt is None:
            self.opt = Adafactor(self.params(), lr=lr, relative_step=False, scale_parameter=False, warmup_init=False)
        for g in self.opt.param_groups:
            g["lr"] = lr
        for m in self.model.modules():
            if isinstance(m, torch.nn.Dropout):
                m.p = optimizer["dropout"]
        self.model.train()
        self.opt.zero_grad()
        total, count = 0.0, 0
        losses = []
        for ex in batch:
            loss, n = self.example_loss(ex)
            losses.append(loss)
            count += n
        loss = sum(losses) / max(1, count)
        loss.backward()
        self.opt.step()
        self.model.eval()
        total = float(loss.detach())
        return {"step": step, "loss": total, "learning_rate": lr, "examples": len(batch), "active_tokens": count}

    @torch.no_grad()
    def loss(self, batch):
        self.model.eval()
        total, count = 0.0, 0
        for ex in batch:
            l, n = self.example_loss(ex)
            total += float(l)
            count += n
        return total / max(1, count)

    @torch.no_grad()
    def decode(self, prompt, config):
        self.model.eval()
        torch.manual_seed(config.get("seed", 0))
        sample = config["top_k"] > 0 or config["top_p"] < 1.0
        out = self.model.generate(
            inputs_embeds=self.embed(prompt),
            num_beams=config["beam_size"],
            do_sample=sample,
            top_k=config["top_k"] if config["top_k"] > 0 else None,
            top_p=config["top_p"],
            max_new_tokens=config["max_new_tokens"],
        )
        return self.tok.decode(out[0], skip_special_tokens=False)

    @torch.no_grad()
    def score(self, prompt, targets):
        self.model.eval()
        embeds = self.embed(prompt)
        scores = []
        for t in targets:
            ids, _ = self.encode(t)
            ids = ids + [self.tok.eos_token_id]
            dec = torch.tensor([ids], device=self.device)
            out = self.model(inputs_embeds=embeds, decoder_input_ids=self.model._shift_right(dec))
            logp = torch.log_softmax(out.logits, dim=-1)[0]
            scores.append(float(logp.gather(1, dec[0].unsqueeze(1)).sum()))
        return scores

    def save(self, dir):
        os.makedirs(dir, exist_ok=True)
        self.model.save_pretrained(dir)
        self.tok.save_pretrained(dir)
        if self.soft is not None:
            torch.save({"index": self.soft[0], "rows": self.soft[1].detach().cpu()}, os.path.join(dir, SOFT_FILE))
        return None

    def load(self, dir):
        self.model = T5ForConditionalGeneration.from_pretrained(dir).to(self.device)
        self.tok = AutoTokenizer.from_pretrained(dir)
        path = os.path.join(dir, SOFT_FILE)
        if os.path.exists(path):
            state = torch.load(path)
            self.soft = (state["index"], torch.nn.Parameter(state["rows"].to(self.device)))
        else:
            self.soft = None
        self.opt = None
        return None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True, help="model name or local directory")
    ap.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    args = ap.parse_args()
    worker = Worker(args.model, args.device)
    handlers = {
        "info": lambda r: worker.info(),
        "tokenize": lambda r: worker.tokenize(r["text"]),
        "enable_soft_prompt": lambda r: worker.enable_soft_prompt(r["spec"]),
        "train_step": lambda r: worker.train_step(r["batch"], r["optimizer"], r["step"]),
        "loss": lambda r: worker.loss(r["batch"]),
        "decode": lambda r: worker.decode(r["prompt"], r["config"]),
        "score": lambda r: worker.score(r["prompt"], r["targets"]),
        "save": lambda r: worker.save(r["dir"]),
        "load": lambda r: worker.load(r["dir"]),
        "shutdown": lambda r: None,
    }
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            result = handlers[req["op"]](req)
            reply = {"ok": True, "result": result}
        except Exception as e:  # reported to the client, never fatal
            req = {}
            reply = {"ok": False, "error": f"{type(e).__name__}: {e}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
        if req.get("op") == "shutdown":
            break


if __name__ == "__main__":
    main()
