"""Silver rationales from the references a decision makes to its own facts.

Usage: python3 demos/extract_silver.py
"""

from paragraph_rationales.silver import extract_silver_rationales

DECISION = """\
The applicant complained about the conditions of his detention (see paragraphs 5-7 above).
The Court refers to its findings in Draci v. Russia, no. 25452/05, paragraph 58, and notes that
the domestic courts examined the complaint (see paragraph 12 above). Paragraphs 14 and 16
describe the medical reports; paragraph 40 of the Government's observations is not relevant.
"""

if __name__ == "__main__":
    found = sorted(extract_silver_rationales(DECISION, n_facts=20))
    print("fact paragraphs referenced (1-based):", [i + 1 for i in found])
    print("silver rationale (0-based indices):  ", found)
