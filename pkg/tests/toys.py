"""Turn a package toy instance into the plain-list input of the reference oracle."""

from pctl.encoder import SOURCE, TARGET


def oracle_input(toy):
    src, tgt = toy.batches()

    def dom(batch, online, momentum, name):
        negs_in = toy.negatives.intra[name]
        negs_x = toy.negatives.inter[name]
        return {
            "online": online.tolist(),
            "momentum": momentum.tolist(),
            "labels": [int(y) for y in batch.labels],
            "instance_negatives": negs_in.instance.tolist(),
            "intra_proto_negatives": [p.tolist() for p in negs_in.prototypes],
            "inter_proto_negatives": [p.tolist() for p in negs_x.prototypes],
            "rounds": [
                {"centroids": r.centroids.tolist(), "phi": r.concentration.tolist(), "assignments": r.assignments.tolist()}
                for r in toy.bank.rounds[name]
            ],
        }

    return {
        "source": dom(src, toy.source_online, toy.source_momentum, SOURCE),
        "target": dom(tgt, toy.target_online, toy.target_momentum, TARGET),
        "inv_temp": toy.inv_temp,
        "lam": toy.lam,
        "w1": toy.cls_w1.tolist(),
        "b1": toy.cls_b1.tolist(),
        "w2": toy.cls_w2.tolist(),
    }
