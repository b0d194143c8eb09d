# Integration tests for VAS-MS-V2
